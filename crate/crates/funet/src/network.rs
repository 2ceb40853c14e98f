//! The three segmentation networks: a plain U-net, and a batch-normalized
//! residual variant shared by the remaining two methods (which differ only in
//! the loss weighting, not the graph).
//!
//! A [`Network`] owns its parameters and batch-norm running statistics as
//! plain buffers. Each forward pass registers them on a fresh [`Tape`], wires
//! the encoder–decoder graph, and returns the tape so callers can run
//! [`Tape::backward`] and read per-parameter gradients.

use crate::error::{Error, Result};
use crate::tensor::{BnState, Mode, Padding, Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

/// Architecture family: `plain` stacks bare conv+relu pairs; `bru` wraps each
/// layer in batch norm and a residual shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Bru,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Bru => "bru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "bru" => Ok(Variant::Bru),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected plain or bru)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of a network: everything needed to rebuild its
/// parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Number of down-samplings; channels double at each level.
    pub depth: usize,
    /// Channels in the first layer.
    pub base_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            variant: Variant::Plain,
            depth: 4,
            base_channels: 16,
            num_classes: 3,
            dropout_rate: 0.25,
            input_channels: 1,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channels produced at contraction level `d`.
    fn channels_at(&self, d: usize) -> usize {
        self.base_channels << d
    }
}

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A batch-norm site: its running statistics plus the name they serialize
/// under.
#[derive(Debug, Clone, PartialEq)]
struct BnSite {
    name: String,
    state: BnState,
}

/// One entry in the canonical parameter layout.
enum Slot {
    /// Convolution kernel (`[cout, cin, k, k]`) plus bias, He-initialized.
    Conv { cin: usize, cout: usize, k: usize },
    /// Transposed 2x2 convolution kernel (`[c, c/2, 2, 2]`) plus bias.
    UpConv { c: usize },
    /// Batch-norm site: gamma (ones), beta (zeros), and running statistics.
    Bn { ch: usize },
}

/// Enumerates every parameter-bearing site in canonical (forward) order.
/// Build, save, and load all walk this one list, so the file format and the
/// in-memory layout cannot drift apart.
fn layout(spec: &NetworkSpec) -> Vec<(String, Slot)> {
    let mut slots = Vec::new();
    let layer = |slots: &mut Vec<(String, Slot)>, name: &str, cin: usize, cout: usize| {
        match spec.variant {
            Variant::Plain => {
                slots.push((format!("{name}.conv1"), Slot::Conv { cin, cout, k: 3 }));
                slots.push((format!("{name}.conv2"), Slot::Conv { cin: cout, cout, k: 3 }));
            }
            Variant::Bru => {
                slots.push((format!("{name}.conv1"), Slot::Conv { cin, cout, k: 3 }));
                slots.push((format!("{name}.bn1"), Slot::Bn { ch: cout }));
                slots.push((format!("{name}.conv2"), Slot::Conv { cin: cout, cout, k: 3 }));
                slots.push((format!("{name}.bn2"), Slot::Bn { ch: cout }));
                if cin != cout {
                    slots.push((format!("{name}.proj"), Slot::Conv { cin, cout, k: 1 }));
                    slots.push((format!("{name}.proj_bn"), Slot::Bn { ch: cout }));
                }
            }
        }
    };

    let mut cin = spec.input_channels;
    for d in 0..spec.depth {
        let cout = spec.channels_at(d);
        layer(&mut slots, &format!("down{d}"), cin, cout);
        cin = cout;
    }
    layer(&mut slots, "bottleneck", cin, spec.channels_at(spec.depth));
    for d in (0..spec.depth).rev() {
        let ch = spec.channels_at(d);
        slots.push((format!("up{d}.upconv"), Slot::UpConv { c: 2 * ch }));
        layer(&mut slots, &format!("up{d}"), 2 * ch, ch);
    }
    slots.push((
        "head".into(),
        Slot::Conv {
            cin: spec.base_channels,
            cout: spec.num_classes,
            k: 1,
        },
    ));
    slots
}

/// Result of one forward pass: the tape it was recorded on plus handles into
/// it. `param_ids[i]` is the leaf for `Network::param(i)`, so after
/// `tape.backward(..)` its gradient is `tape.grad(param_ids[i])`.
pub struct Forward {
    pub tape: Tape,
    pub logits: TensorId,
    pub probs: TensorId,
    pub param_ids: Vec<TensorId>,
}

/// A built network: spec, named parameters in canonical order, and batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    bn_sites: Vec<BnSite>,
}

impl Network {
    /// Builds a freshly initialized network: He-normal kernels
    /// (std `sqrt(2 / (cin*k*k))`), zero biases, unit gammas, zero betas.
    pub fn build<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Network> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut bn_sites = Vec::new();
        for (name, slot) in layout(&spec) {
            match slot {
                Slot::Conv { cin, cout, k } => {
                    // The classification head starts near zero so a fresh
                    // network predicts close to uniformly (initial loss at
                    // the ln C chance baseline) regardless of variant or
                    // depth; every other convolution uses plain He scaling.
                    let shrink = if name == "head" { 0.1 } else { 1.0 };
                    let std = shrink * (2.0 / (cin * k * k) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let n = cout * cin * k * k;
                    params.push(Param {
                        name: format!("{name}.weight"),
                        shape: vec![cout, cin, k, k],
                        data: (0..n).map(|_| dist.sample(rng)).collect(),
                    });
                    params.push(Param {
                        name: format!("{name}.bias"),
                        shape: vec![cout],
                        data: vec![0.0; cout],
                    });
                }
                Slot::UpConv { c } => {
                    let half = c / 2;
                    let std = (2.0 / (c * 4) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let n = c * half * 4;
                    params.push(Param {
                        name: format!("{name}.weight"),
                        shape: vec![c, half, 2, 2],
                        data: (0..n).map(|_| dist.sample(rng)).collect(),
                    });
                    params.push(Param {
                        name: format!("{name}.bias"),
                        shape: vec![half],
                        data: vec![0.0; half],
                    });
                }
                Slot::Bn { ch } => {
                    params.push(Param {
                        name: format!("{name}.gamma"),
                        shape: vec![ch],
                        data: vec![1.0; ch],
                    });
                    params.push(Param {
                        name: format!("{name}.beta"),
                        shape: vec![ch],
                        data: vec![0.0; ch],
                    });
                    bn_sites.push(BnSite {
                        name,
                        state: BnState::new(ch),
                    });
                }
            }
        }
        Ok(Network {
            spec,
            params,
            bn_sites,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i].data
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Training-mode forward: records gradients, uses batch statistics
    /// (updating the running stats), and applies dropout from `rng`.
    pub fn forward_train<R: Rng>(&mut self, images: &Tensor, rng: &mut R) -> Result<Forward> {
        run(&self.spec, &self.params, &mut self.bn_sites, images, Mode::Train, rng)
    }

    /// Eval-mode forward: deterministic, uses running statistics, dropout is
    /// the identity.
    pub fn forward_eval(&self, images: &Tensor) -> Result<Forward> {
        // Eval never draws from the rng and never writes the running stats;
        // the clone keeps `self` immutable.
        let mut sites = self.bn_sites.clone();
        let mut rng = NoDraws;
        run(&self.spec, &self.params, &mut sites, images, Mode::Eval, &mut rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Network::from_bytes(&bytes, path)
    }

    fn bn_initialized(&self) -> bool {
        // All sites run on every batch, so their flags move together.
        let flag = self.bn_sites.first().map(|s| s.state.initialized());
        debug_assert!(self
            .bn_sites
            .iter()
            .all(|s| Some(s.state.initialized()) == flag));
        flag.unwrap_or(false)
    }

    fn to_bytes(&self) -> Vec<u8> {
        use std::io::Write;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let s = &self.spec;
        write!(
            buf,
            "variant={}\ndepth={}\nbase_channels={}\nnum_classes={}\ndropout_rate={}\ninput_channels={}\nbn_initialized={}\n\n",
            s.variant, s.depth, s.base_channels, s.num_classes, s.dropout_rate, s.input_channels,
            self.bn_initialized(),
        )
        .expect("write to vec");
        let entry = |buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]| {
            buf.extend_from_slice(name.as_bytes());
            buf.push(b'\n');
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            buf.extend_from_slice(dims.join(" ").as_bytes());
            buf.push(b'\n');
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            entry(&mut buf, &p.name, &p.shape, &p.data);
        }
        for site in &self.bn_sites {
            let ch = site.state.channels();
            entry(&mut buf, &format!("{}.running_mean", site.name), &[ch], site.state.mean());
            entry(&mut buf, &format!("{}.running_var", site.name), &[ch], site.state.var());
        }
        let sum = fnv1a(&buf);
        write!(buf, "checksum={sum:016x}\n").expect("write to vec");
        buf
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<Network> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::format(path, "bad magic (expected FUNET1)"));
        }

        let mut keys: HashMap<String, String> = HashMap::new();
        loop {
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("malformed header line {line:?}")))?;
            if keys.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::format(path, format!("duplicate header key {k:?}")));
            }
        }
        let mut get = |k: &str| {
            keys.remove(k)
                .ok_or_else(|| Error::format(path, format!("missing header key {k:?}")))
        };
        let spec = NetworkSpec {
            variant: Variant::parse(&get("variant")?)
                .map_err(|e| Error::format(path, e.to_string()))?,
            depth: parse_field(path, "depth", &get("depth")?)?,
            base_channels: parse_field(path, "base_channels", &get("base_channels")?)?,
            num_classes: parse_field(path, "num_classes", &get("num_classes")?)?,
            dropout_rate: parse_field(path, "dropout_rate", &get("dropout_rate")?)?,
            input_channels: parse_field(path, "input_channels", &get("input_channels")?)?,
        };
        let initialized: bool = parse_field(path, "bn_initialized", &get("bn_initialized")?)?;
        if let Some(k) = keys.keys().next() {
            return Err(Error::format(path, format!("unknown header key {k:?}")));
        }
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;

        let entry = |r: &mut Reader, name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let got_name = r.line()?;
            if got_name != name {
                return Err(Error::format(
                    path,
                    format!("parameter name mismatch: expected {name:?}, found {got_name:?}"),
                ));
            }
            let got_shape = r.line()?;
            let expect: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            if got_shape != expect.join(" ") {
                return Err(Error::format(
                    path,
                    format!("shape mismatch for {name}: expected {shape:?}, found {got_shape:?}"),
                ));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };

        let mut params = Vec::new();
        let mut bn_shapes = Vec::new();
        for (name, slot) in layout(&spec) {
            match slot {
                Slot::Conv { cin, cout, k } => {
                    let shape = vec![cout, cin, k, k];
                    let data = entry(&mut r, &format!("{name}.weight"), &shape)?;
                    params.push(Param { name: format!("{name}.weight"), shape, data });
                    let data = entry(&mut r, &format!("{name}.bias"), &[cout])?;
                    params.push(Param { name: format!("{name}.bias"), shape: vec![cout], data });
                }
                Slot::UpConv { c } => {
                    let shape = vec![c, c / 2, 2, 2];
                    let data = entry(&mut r, &format!("{name}.weight"), &shape)?;
                    params.push(Param { name: format!("{name}.weight"), shape, data });
                    let data = entry(&mut r, &format!("{name}.bias"), &[c / 2])?;
                    params.push(Param { name: format!("{name}.bias"), shape: vec![c / 2], data });
                }
                Slot::Bn { ch } => {
                    let data = entry(&mut r, &format!("{name}.gamma"), &[ch])?;
                    params.push(Param { name: format!("{name}.gamma"), shape: vec![ch], data });
                    let data = entry(&mut r, &format!("{name}.beta"), &[ch])?;
                    params.push(Param { name: format!("{name}.beta"), shape: vec![ch], data });
                    bn_shapes.push((name, ch));
                }
            }
        }
        let mut bn_sites = Vec::new();
        for (name, ch) in bn_shapes {
            let mean = entry(&mut r, &format!("{name}.running_mean"), &[ch])?;
            let var = entry(&mut r, &format!("{name}.running_var"), &[ch])?;
            bn_sites.push(BnSite {
                name,
                state: BnState::from_parts(mean, var, initialized)?,
            });
        }

        let body_end = r.pos;
        let trailer = r.line()?;
        let expect = format!("checksum={:016x}", fnv1a(&bytes[..body_end]));
        if trailer != expect {
            return Err(Error::format(path, "checksum mismatch (file corrupted?)"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checksum"));
        }
        Ok(Network { spec, params, bn_sites })
    }
}

const MAGIC: &[u8] = b"FUNET1\n";

fn parse_field<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(path, format!("invalid value {value:?} for header key {key:?}")))
}

/// FNV-1a 64-bit hash; the model-file integrity check.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(self.path, "truncated file (unterminated line)"))?;
        let s = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format(self.path, "non-UTF-8 text line"))?;
        self.pos += end + 1;
        Ok(s)
    }
}

/// Rng stand-in for eval-mode forwards, which must not consume randomness.
struct NoDraws;

impl rand::RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward must not draw randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward must not draw randomness")
    }

    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("eval-mode forward must not draw randomness")
    }
}

/// Wires one forward pass over a fresh tape.
struct Wire<'a, R: Rng> {
    tape: Tape,
    ids: Vec<TensorId>,
    index: HashMap<&'a str, usize>,
    sites: &'a mut [BnSite],
    site_index: HashMap<String, usize>,
    variant: Variant,
    dropout_rate: f64,
    mode: Mode,
    rng: &'a mut R,
}

impl<'a, R: Rng> Wire<'a, R> {
    fn p(&self, name: &str) -> TensorId {
        self.ids[*self.index.get(name).unwrap_or_else(|| panic!("parameter {name} in layout"))]
    }

    fn conv(&mut self, x: TensorId, name: &str, padding: Padding) -> Result<TensorId> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.tape.conv2d(x, w, b, padding)
    }

    fn bn(&mut self, x: TensorId, site: &str) -> Result<TensorId> {
        let gamma = self.p(&format!("{site}.gamma"));
        let beta = self.p(&format!("{site}.beta"));
        let i = self.site_index[site];
        self.tape.batch_norm(x, gamma, beta, self.mode, &mut self.sites[i].state)
    }

    fn drop(&mut self, x: TensorId) -> Result<TensorId> {
        self.tape.dropout(x, self.dropout_rate, self.mode, self.rng)
    }

    fn layer(&mut self, x: TensorId, name: &str, cin: usize, cout: usize) -> Result<TensorId> {
        match self.variant {
            Variant::Plain => {
                let c1 = self.conv(x, &format!("{name}.conv1"), Padding::Same)?;
                let r1 = self.tape.relu(c1);
                let c2 = self.conv(r1, &format!("{name}.conv2"), Padding::Same)?;
                Ok(self.tape.relu(c2))
            }
            Variant::Bru => {
                let c1 = self.conv(x, &format!("{name}.conv1"), Padding::Same)?;
                let n1 = self.bn(c1, &format!("{name}.bn1"))?;
                let r1 = self.tape.relu(n1);
                let c2 = self.conv(r1, &format!("{name}.conv2"), Padding::Same)?;
                let n2 = self.bn(c2, &format!("{name}.bn2"))?;
                let shortcut = if cin == cout {
                    x
                } else {
                    let p = self.conv(x, &format!("{name}.proj"), Padding::Same)?;
                    self.bn(p, &format!("{name}.proj_bn"))?
                };
                let s = self.tape.add(n2, shortcut)?;
                Ok(self.tape.relu(s))
            }
        }
    }
}

fn run<R: Rng>(
    spec: &NetworkSpec,
    params: &[Param],
    sites: &mut [BnSite],
    images: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Forward> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("forward", "rank", 4, s.len()));
    }
    if s[1] != spec.input_channels {
        return Err(Error::shape("forward", "C", spec.input_channels, s[1]));
    }
    let div = 1usize << spec.depth;
    if s[2] % div != 0 || s[3] % div != 0 {
        return Err(Error::shape(
            "forward",
            "HxW",
            format!("divisible by {div}"),
            format!("{}x{}", s[2], s[3]),
        ));
    }

    let mut tape = Tape::new();
    let requires_grad = mode == Mode::Train;
    let mut ids = Vec::with_capacity(params.len());
    let mut index = HashMap::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        ids.push(tape.leaf_from(p.shape.clone(), p.data.clone(), requires_grad)?);
        index.insert(p.name.as_str(), i);
    }
    let site_index: HashMap<String, usize> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.clone(), i))
        .collect();
    let x = tape.leaf_from(s.to_vec(), images.data().to_vec(), false)?;

    let mut w = Wire {
        tape,
        ids,
        index,
        sites,
        site_index,
        variant: spec.variant,
        dropout_rate: spec.dropout_rate,
        mode,
        rng,
    };

    // Contracting path; each level's (post-dropout) feature map feeds both
    // the pooling below it and the skip concatenation across.
    let mut skips = Vec::with_capacity(spec.depth);
    let mut cur = x;
    let mut cin = spec.input_channels;
    for d in 0..spec.depth {
        let cout = spec.channels_at(d);
        let f = w.layer(cur, &format!("down{d}"), cin, cout)?;
        let f = w.drop(f)?;
        skips.push(f);
        cur = w.tape.max_pool2(f)?;
        cin = cout;
    }
    let f = w.layer(cur, "bottleneck", cin, spec.channels_at(spec.depth))?;
    cur = w.drop(f)?;

    // Expansive path: upsample, concatenate the skip, fuse.
    for d in (0..spec.depth).rev() {
        let ch = spec.channels_at(d);
        let kw = w.p(&format!("up{d}.upconv.weight"));
        let kb = w.p(&format!("up{d}.upconv.bias"));
        let up = w.tape.up_conv2(cur, kw, kb)?;
        let cat = w.tape.concat_channels(up, skips[d])?;
        cur = w.layer(cat, &format!("up{d}"), 2 * ch, ch)?;
    }

    let logits = w.conv(cur, "head", Padding::Same)?;
    let probs = w.tape.softmax_channels(logits)?;
    Ok(Forward {
        tape: w.tape,
        logits,
        probs,
        param_ids: w.ids,
    })
}
