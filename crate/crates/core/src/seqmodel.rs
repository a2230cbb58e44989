//! Temporal convolutional network mapping frame features to three class
//! logits (no speech, one speaker, overlap).
//!
//! Layout: layer norm over features, a 1×1 bottleneck, `blocks` blocks of
//! `layers_per_block` dilated causal convolutions (dilation `2^ℓ`, ReLU) with
//! a residual connection around each block, and a 1×1 output convolution.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::params::{Bound, ParamStore};
use crate::segeval::N_CLASSES;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub input_dim: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub layers_per_block: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub n_classes: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            input_dim: 64,
            bottleneck: 64,
            hidden: 128,
            layers_per_block: 5,
            blocks: 3,
            kernel: 3,
            n_classes: N_CLASSES,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.blocks >= 1, Argument, "TCN needs at least one block");
        ensure!(self.layers_per_block >= 1, Argument, "TCN blocks need at least one layer");
        ensure!(
            self.input_dim >= 1 && self.bottleneck >= 1 && self.hidden >= 1 && self.kernel >= 1,
            Argument,
            "TCN widths and kernel must be positive"
        );
        ensure!(self.n_classes == N_CLASSES, Argument, "TCN must emit {N_CLASSES} classes");
        ensure!(self.layers_per_block < 32, Argument, "dilation 2^{} overflows", self.layers_per_block);
        Ok(())
    }

    /// Frames of context seen by one output frame, itself included.
    pub fn receptive_field(&self) -> usize {
        let per_block: usize = (0..self.layers_per_block).map(|l| (self.kernel - 1) << l).sum();
        1 + self.blocks * per_block
    }

    fn block_input(&self, b: usize) -> usize {
        if b == 0 {
            self.bottleneck
        } else {
            self.hidden
        }
    }

    fn layer_input(&self, b: usize, l: usize) -> usize {
        if l == 0 {
            self.block_input(b)
        } else {
            self.hidden
        }
    }
}

/// TCN weights with their configuration and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnParams {
    pub cfg: TcnConfig,
    pub store: ParamStore,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
}

fn conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize) {
    store.insert(format!("{name}.w"), uniform(rng, &[cout, cin, k], cin * k));
    store.insert(format!("{name}.b"), uniform(rng, &[cout], cin * k));
}

/// Deterministic initialisation: conv weights and biases uniform in
/// `±1/√fan_in`, layer-norm gain 1 and bias 0.
pub fn tcn_init(cfg: &TcnConfig, seed: u64) -> Result<TcnParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert("ln.gain", Tensor::filled(&[cfg.input_dim], 1.0));
    s.insert("ln.bias", Tensor::zeros(&[cfg.input_dim]));
    conv(&mut s, &mut rng, "bottleneck", cfg.bottleneck, cfg.input_dim, 1);
    for b in 0..cfg.blocks {
        for l in 0..cfg.layers_per_block {
            conv(&mut s, &mut rng, &format!("block{b}.conv{l}"), cfg.hidden, cfg.layer_input(b, l), cfg.kernel);
        }
        if cfg.block_input(b) != cfg.hidden {
            conv(&mut s, &mut rng, &format!("block{b}.res"), cfg.hidden, cfg.block_input(b), 1);
        }
    }
    conv(&mut s, &mut rng, "out", cfg.n_classes, cfg.hidden, 1);
    Ok(TcnParams { cfg: cfg.clone(), store: s, seed })
}

impl TcnParams {
    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Checks that every tensor is present with the expected shape and finite.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let reference = tcn_init(&self.cfg, 0)?;
        ensure!(self.store.len() == reference.store.len(), Format, "TCN has {} tensors, expected {}", self.store.len(), reference.store.len());
        for (name, t) in reference.store.iter() {
            let have = self.store.require(name)?;
            ensure!(have.shape() == t.shape(), Format, "{name}: shape {:?}, expected {:?}", have.shape(), t.shape());
            ensure!(have.all_finite(), Numeric, "{name} has non-finite entries");
        }
        Ok(())
    }
}

/// Records the TCN on `tape` for features `x: [T, input_dim]`; parameters are
/// looked up in `vars` under `prefix`. Returns logits `[T, n_classes]`.
pub fn tcn_forward(tape: &mut Tape, cfg: &TcnConfig, vars: &Bound, prefix: &str, x: Var) -> Var {
    let v = |n: &str| vars.var(&format!("{prefix}{n}"));
    let conv = |tape: &mut Tape, name: &str, x: Var, dilation: usize| {
        tape.causal_conv(x, v(&format!("{name}.w")), v(&format!("{name}.b")), dilation)
    };
    let h = tape.layer_norm(x, v("ln.gain"), v("ln.bias"), LAYER_NORM_EPS);
    let mut h = conv(tape, "bottleneck", h, 1);
    for b in 0..cfg.blocks {
        let input = h;
        for l in 0..cfg.layers_per_block {
            let y = conv(tape, &format!("block{b}.conv{l}"), h, 1 << l);
            h = tape.relu(y);
        }
        let skip = if cfg.block_input(b) != cfg.hidden {
            conv(tape, &format!("block{b}.res"), input, 1)
        } else {
            input
        };
        h = tape.add(h, skip);
    }
    conv(tape, "out", h, 1)
}

/// Logits `T × n_classes` for features `T × input_dim`.
pub fn tcn_logits(p: &TcnParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    ensure!(x.nrows() >= 1, Argument, "TCN input needs at least one frame");
    ensure!(x.ncols() == p.cfg.input_dim, Argument, "TCN expects {} features, got {}", p.cfg.input_dim, x.ncols());
    let mut tape = Tape::new();
    let vars = p.store.bind_frozen(&mut tape);
    let xv = tape.constant(Tensor::from_array(x));
    let out = tcn_forward(&mut tape, &p.cfg, &vars, "", xv);
    let t = tape.value(out);
    ensure!(t.all_finite(), Numeric, "non-finite TCN logits");
    Ok(Array2::from_shape_vec((x.nrows(), p.cfg.n_classes), t.data().to_vec()).unwrap())
}

/// Row-wise softmax with max subtraction.
pub fn posteriors(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Speech score `p(1) + p(2)` per frame.
pub fn vad_scores(post: &Array2<f64>) -> Vec<f64> {
    post.rows().into_iter().map(|r| r[1] + r[2]).collect()
}

/// Overlap score `p(2)` per frame.
pub fn osd_scores(post: &Array2<f64>) -> Vec<f64> {
    post.column(2).to_vec()
}

/// Posteriors as CSV with a `p0,p1,p2` header.
pub fn posteriors_csv(post: &Array2<f64>) -> String {
    let mut s = String::from("frame,p0,p1,p2\n");
    for (t, r) in post.rows().into_iter().enumerate() {
        s.push_str(&format!("{t},{:.9},{:.9},{:.9}\n", r[0], r[1], r[2]));
    }
    s
}
