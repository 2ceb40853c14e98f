//! The feedback weight curve, printed as a table and a terminal plot.
//!
//! A pixel predicted with probability `p` for its true class contributes to
//! the loss with weight `w(p) = exp(-ln(100) * p^beta)`: full weight 1 at
//! `p = 0`, floor weight 0.01 at `p = 1`. Raising `beta` flattens the curve
//! near zero, so only confidently-correct pixels get discounted.
//!
//! Run with: `cargo run --example weight_curve`

use funet::loss::weight;

fn main() {
    let betas = [1.0, 2.0, 3.0, 4.0];

    println!("w(p) = exp(-ln(100) * p^beta)\n");
    println!("   p     beta=1    beta=2    beta=3    beta=4");
    for i in 0..=10 {
        let p = i as f64 / 10.0;
        print!("{p:4.1} ");
        for beta in betas {
            print!("  {:8.6}", weight(p, beta));
        }
        println!();
    }

    // Terminal plot: w on the vertical axis, p on the horizontal, each curve
    // drawn with its beta digit (later curves overwrite at shared points).
    const ROWS: usize = 16;
    const COLS: usize = 61;
    let mut grid = vec![vec![' '; COLS]; ROWS];
    for (k, beta) in betas.iter().enumerate() {
        for col in 0..COLS {
            let p = col as f64 / (COLS - 1) as f64;
            let w = weight(p, *beta);
            let row = ((1.0 - w) * (ROWS - 1) as f64).round() as usize;
            grid[row][col] = char::from_digit(k as u32 + 1, 10).unwrap();
        }
    }
    println!();
    for (row, line) in grid.iter().enumerate() {
        let w = 1.0 - row as f64 / (ROWS - 1) as f64;
        println!("{w:4.2} |{}", line.iter().collect::<String>());
    }
    println!("     +{}", "-".repeat(COLS));
    println!("      p=0{}p=1", " ".repeat(COLS - 6));

    println!("\nEndpoints shared by every beta:");
    println!("  w(0) = {}   (hard pixels keep full weight)", weight(0.0, 3.0));
    println!("  w(1) = {}   (mastered pixels keep 1% weight)", weight(1.0, 3.0));
    println!("\nThe same curves as CSV: `funet weight-curve --out <dir>`");
}
