//! Multilayer perceptron: tanh hidden layers, identity output, affine
//! normalizers on both ends, full-batch gradient descent.
//!
//! Gradients are summed over fixed row chunks and the chunk sums are added in
//! chunk order, so training is bit-identical with or without the thread pool.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AnnError;
use crate::par::{self, ExecMode};

/// Rows per gradient chunk.
const CHUNK: usize = 64;
const DIVERGED: f64 = 1e6;
const FORMAT_TAG: &str = "vvs-mlp 1";

/// Per-feature `z = (x - offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Normalizer {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation per column; constant columns get `flat_scale`.
    pub fn fit(rows: &[Vec<f64>], flat_scale: f64) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut offset = vec![0.0; d];
        for r in rows {
            for (o, x) in offset.iter_mut().zip(r) {
                *o += x;
            }
        }
        offset.iter_mut().for_each(|o| *o /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), o) in var.iter_mut().zip(r).zip(&offset) {
                *v += (x - o).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    flat_scale
                }
            })
            .collect();
        Normalizer { offset, scale }
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset).zip(&self.scale).map(|((x, o), s)| (x - o) / s).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.offset).zip(&self.scale).map(|((z, o), s)| z * s + o).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` maps layer `l` to layer `l + 1`, shape `out × in`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
}

/// Normalized training data, one sample per column.
#[derive(Debug, Clone)]
pub struct Batch {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            step_size: 0.1,
            exec: ExecMode::default(),
        }
    }
}

/// Gradient of the normalized-space MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
    /// identity normalizers.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, AnnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(AnnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // row-major draw order keeps the stream independent of storage order
            let mut m = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    m[(r, c)] = rng.random_range(-a..=a);
                }
            }
            weights.push(m);
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            input_norm: Normalizer::identity(sizes[0]),
            output_norm: Normalizer::identity(sizes[sizes.len() - 1]),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Activations of every layer for a normalized input block.
    fn activations(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().expect("nonempty");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, AnnError> {
        if x.len() != self.input_len() {
            return Err(AnnError::Dimension {
                expected: self.input_len(),
                got: x.len(),
            });
        }
        let z = DMatrix::from_column_slice(x.len(), 1, &self.input_norm.normalize(x));
        let out = self.activations(&z).pop().expect("output layer");
        Ok(self.output_norm.denormalize(out.as_slice()))
    }

    /// Fits both normalizers to the data. Constant targets get a vanishing
    /// scale so the model reproduces them exactly.
    pub fn fit_normalizers(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) {
        self.input_norm = Normalizer::fit(inputs, 1.0);
        self.output_norm = Normalizer::fit(targets, 1e-9);
    }

    /// Normalizes raw rows into a training batch.
    pub fn batch(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Batch, AnnError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(AnnError::Shape(format!("{} input rows, {} target rows", inputs.len(), targets.len())));
        }
        let (din, dout) = (self.input_len(), self.output_len());
        let mut x = DMatrix::zeros(din, inputs.len());
        let mut y = DMatrix::zeros(dout, inputs.len());
        for (j, (a, b)) in inputs.iter().zip(targets).enumerate() {
            if a.len() != din {
                return Err(AnnError::Dimension { expected: din, got: a.len() });
            }
            if b.len() != dout {
                return Err(AnnError::Dimension {
                    expected: dout,
                    got: b.len(),
                });
            }
            x.column_mut(j).copy_from_slice(&self.input_norm.normalize(a));
            y.column_mut(j).copy_from_slice(&self.output_norm.normalize(b));
        }
        Ok(Batch { x, y })
    }

    /// Chunk-summed MSE `Σ (ŷ - y)² / (rows · outputs)` and its gradient.
    fn chunk_gradient(&self, batch: &Batch, start: usize, len: usize, denom: f64) -> (f64, Gradient) {
        let x = batch.x.columns(start, len).into_owned();
        let y = batch.y.columns(start, len);
        let acts = self.activations(&x);
        let mut delta = acts.last().expect("output") - y;
        let loss = delta.norm_squared() / denom;
        delta *= 2.0 / denom;
        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        (loss, Gradient { weights: gw, biases: gb })
    }

    /// Normalized-space MSE and gradient over the whole batch.
    pub fn loss_and_gradient(&self, batch: &Batch, exec: ExecMode) -> (f64, Gradient) {
        let rows = batch.rows();
        let denom = (rows * self.output_len()) as f64;
        let chunks = rows.div_ceil(CHUNK);
        let parts = par::map_range(exec, chunks, |c| {
            let start = c * CHUNK;
            self.chunk_gradient(batch, start, CHUNK.min(rows - start), denom)
        });
        let mut it = parts.into_iter();
        let (mut loss, mut grad) = it.next().expect("at least one row");
        for (l, g) in it {
            loss += l;
            for (a, b) in grad.weights.iter_mut().zip(&g.weights) {
                *a += b;
            }
            for (a, b) in grad.biases.iter_mut().zip(&g.biases) {
                *a += b;
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, batch: &Batch) -> f64 {
        let acts = self.activations(&batch.x);
        (acts.last().expect("output") - &batch.y).norm_squared() / (batch.rows() * self.output_len()) as f64
    }

    /// Gradient descent on a prepared batch. Returns the loss before every
    /// update followed by the final loss.
    pub fn train(&mut self, batch: &Batch, config: &TrainConfig) -> Result<Vec<f64>, AnnError> {
        let mut curve = Vec::with_capacity(config.epochs + 1);
        for epoch in 0..config.epochs {
            let (loss, g) = self.loss_and_gradient(batch, config.exec);
            check(loss, epoch)?;
            curve.push(loss);
            for (w, gw) in self.weights.iter_mut().zip(&g.weights) {
                *w -= gw * config.step_size;
            }
            for (b, gb) in self.biases.iter_mut().zip(&g.biases) {
                *b -= gb * config.step_size;
            }
        }
        let last = self.loss(batch);
        check(last, config.epochs)?;
        curve.push(last);
        Ok(curve)
    }

    /// Versioned line-oriented text form. Floats use shortest round-trip
    /// formatting, so the bytes depend only on the values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        s.push_str(FORMAT_TAG);
        s.push('\n');
        s.push_str(&format!(
            "layers {}\n",
            self.sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
        ));
        s.push_str(&format!("input_offset {}\n", join(&mut self.input_norm.offset.iter().copied())));
        s.push_str(&format!("input_scale {}\n", join(&mut self.input_norm.scale.iter().copied())));
        s.push_str(&format!("output_offset {}\n", join(&mut self.output_norm.offset.iter().copied())));
        s.push_str(&format!("output_scale {}\n", join(&mut self.output_norm.scale.iter().copied())));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            for r in 0..w.nrows() {
                s.push_str(&format!("w{l} {}\n", join(&mut w.row(r).iter().copied())));
            }
            s.push_str(&format!("b{l} {}\n", join(&mut b.iter().copied())));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, AnnError> {
        let bad = |n: usize, m: String| AnnError::Format { line: n + 1, message: m };
        let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
        match lines.first() {
            Some((_, l)) if l.trim() == FORMAT_TAG => {}
            _ => return Err(bad(0, format!("expected header `{FORMAT_TAG}`"))),
        }
        let mut cursor = lines[1..].iter();
        let mut next = |key: &str, len: Option<usize>| -> Result<(usize, Vec<f64>), AnnError> {
            let &(n, line) = cursor.next().ok_or_else(|| bad(lines.len(), format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(n, format!("expected `{key}`")));
            }
            let vals = parts
                .map(|t| t.parse::<f64>().map_err(|_| bad(n, format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(n, "non-finite value".into()));
            }
            if let Some(len) = len.filter(|&l| l != vals.len()) {
                return Err(bad(n, format!("`{key}` has {} values, expected {len}", vals.len())));
            }
            Ok((n, vals))
        };
        let (n, sizes) = next("layers", None)?;
        if sizes.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(bad(n, "layer sizes must be positive integers".into()));
        }
        let sizes: Vec<usize> = sizes.iter().map(|&v| v as usize).collect();
        let mut m = Mlp::new(&sizes, 0).map_err(|e| bad(n, e.to_string()))?;
        let (din, dout) = (m.input_len(), m.output_len());
        m.input_norm.offset = next("input_offset", Some(din))?.1;
        m.input_norm.scale = next("input_scale", Some(din))?.1;
        m.output_norm.offset = next("output_offset", Some(dout))?.1;
        let (n, scale) = next("output_scale", Some(dout))?;
        m.output_norm.scale = scale;
        if m.input_norm.scale.iter().chain(&m.output_norm.scale).any(|s| *s == 0.0) {
            return Err(bad(n, "normalizer scale must be nonzero".into()));
        }
        for l in 0..m.weights.len() {
            let (rows, cols) = m.weights[l].shape();
            for r in 0..rows {
                let (_, v) = next(&format!("w{l}"), Some(cols))?;
                for (c, x) in v.into_iter().enumerate() {
                    m.weights[l][(r, c)] = x;
                }
            }
            m.biases[l] = DVector::from_vec(next(&format!("b{l}"), Some(rows))?.1);
        }
        Ok(m)
    }
}

fn check(loss: f64, epoch: usize) -> Result<(), AnnError> {
    if !loss.is_finite() || loss > DIVERGED {
        return Err(AnnError::Diverged { epoch, loss });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_offset() {
        let mut m = Mlp::new(&[3, 4, 2], 1).unwrap();
        m.weights.iter_mut().for_each(|w| w.fill(0.0));
        m.output_norm.offset = vec![0.3, -2.0];
        m.output_norm.scale = vec![5.0, 7.0];
        assert_eq!(m.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.3, -2.0]);
        assert_eq!(m.forward(&[-9.0, 0.0, 3.5]).unwrap(), vec![0.3, -2.0]);
        assert!(matches!(m.forward(&[1.0]), Err(AnnError::Dimension { .. })));
    }

    #[test]
    fn single_linear_neuron() {
        let mut m = Mlp::new(&[1, 1], 0).unwrap();
        m.weights[0][(0, 0)] = 2.0;
        m.biases[0][0] = 1.0;
        assert_eq!(m.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn fits_a_line() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![2.0 * x[0]]).collect();
        let mut m = Mlp::new(&[1, 1], 3).unwrap();
        m.fit_normalizers(&xs, &ys);
        let b = m.batch(&xs, &ys).unwrap();
        let curve = m
            .train(
                &b,
                &TrainConfig {
                    epochs: 2000,
                    step_size: 0.2,
                    exec: ExecMode::Sequential,
                },
            )
            .unwrap();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        let mse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (m.forward(x).unwrap()[0] - y[0]).powi(2))
            .sum::<f64>()
            / 50.0;
        assert!(mse < 1e-6, "mse {mse}");
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let xs: Vec<Vec<f64>> = (0..130).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * x[1], x[0] - x[1]]).collect();
        let mut a = Mlp::new(&[2, 8, 2], 9).unwrap();
        a.fit_normalizers(&xs, &ys);
        let b = a.batch(&xs, &ys).unwrap();
        let before = a.clone();
        a.train(
            &b,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a, before);
        let cfg = TrainConfig {
            epochs: 50,
            step_size: 0.05,
            exec: ExecMode::Parallel,
        };
        let mut c = before.clone();
        let mut d = before.clone();
        c.train(&b, &cfg).unwrap();
        d.train(
            &b,
            &TrainConfig {
                exec: ExecMode::Sequential,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn text_round_trip() {
        let mut m = Mlp::new(&[3, 5, 2], 4).unwrap();
        m.input_norm.offset = vec![0.1, 1.0 / 3.0, -7.25];
        m.output_norm.scale = vec![1e-9, 2.5];
        let text = m.to_text();
        let back = Mlp::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(Mlp::from_text("garbage").is_err());
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(Mlp::from_text(&truncated).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * 3.0]).collect();
        let mut m = Mlp::new(&[1, 1], 0).unwrap();
        m.fit_normalizers(&xs, &ys);
        let b = m.batch(&xs, &ys).unwrap();
        let r = m.train(
            &b,
            &TrainConfig {
                epochs: 200,
                step_size: 50.0,
                exec: ExecMode::Sequential,
            },
        );
        assert!(matches!(r, Err(AnnError::Diverged { .. })));
    }
}
