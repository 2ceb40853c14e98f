fn main() {
    std::process::exit(funet::cli::main_entry(std::env::args()));
}
