//! Reference implementations for integration tests. Plain loops in f64 over
//! full weight matrices; nothing here calls the library's kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, one row per output neuron.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
    pub step: u64,
}

impl RefLayer {
    pub fn new(in_dim: usize, out_dim: usize, w: Vec<f64>, b: Vec<f64>) -> Self {
        assert_eq!(w.len(), in_dim * out_dim);
        assert_eq!(b.len(), out_dim);
        RefLayer {
            in_dim,
            out_dim,
            m_w: vec![0.0; w.len()],
            v_w: vec![0.0; w.len()],
            m_b: vec![0.0; out_dim],
            v_b: vec![0.0; out_dim],
            w,
            b,
            step: 0,
        }
    }
}

/// ReLU hidden layers, softmax output.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
}

pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn target(labels: &[u32], j: u32) -> f64 {
    if labels.contains(&j) {
        1.0 / labels.len() as f64
    } else {
        0.0
    }
}

impl RefNet {
    /// Activations of every layer; the last entry holds the logits.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let nl = self.layers.len();
        for (k, l) in self.layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let out: Vec<f64> = (0..l.out_dim)
                .map(|j| {
                    let z = l.b[j] + (0..l.in_dim).map(|i| l.w[j * l.in_dim + i] * prev[i]).sum::<f64>();
                    if k + 1 < nl {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts.remove(0);
        acts
    }

    /// Cross-entropy with target mass split evenly over the labels.
    pub fn loss(&self, x: &[f64], labels: &[u32]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let p = softmax(self.forward(x).last().unwrap());
        -labels.iter().map(|&l| p[l as usize].ln() / labels.len() as f64).sum::<f64>()
    }

    pub fn batch_loss(&self, batch: &[(Vec<f64>, Vec<u32>)]) -> f64 {
        batch.iter().map(|(x, y)| self.loss(x, y)).sum()
    }

    /// Gradients of the summed batch loss.
    pub fn gradients(&self, batch: &[(Vec<f64>, Vec<u32>)]) -> Grads {
        let mut g = Grads {
            w: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: self.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        };
        let nl = self.layers.len();
        for (x, labels) in batch {
            if labels.is_empty() {
                continue;
            }
            let acts = self.forward(x);
            let p = softmax(&acts[nl - 1]);
            let mut delta: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(j, pj)| pj - target(labels, j as u32))
                .collect();
            for k in (0..nl).rev() {
                let l = &self.layers[k];
                let input: &[f64] = if k == 0 { x } else { &acts[k - 1] };
                for j in 0..l.out_dim {
                    g.b[k][j] += delta[j];
                    for i in 0..l.in_dim {
                        g.w[k][j * l.in_dim + i] += delta[j] * input[i];
                    }
                }
                if k > 0 {
                    delta = (0..l.in_dim)
                        .map(|i| {
                            if input[i] <= 0.0 {
                                0.0
                            } else {
                                (0..l.out_dim).map(|j| delta[j] * l.w[j * l.in_dim + i]).sum()
                            }
                        })
                        .collect();
                }
            }
        }
        g
    }

    /// Adam over every parameter.
    pub fn adam(&mut self, g: &Grads, opt: Adam) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.step += 1;
            let t = l.step as f64;
            let (bc1, bc2) = (1.0 - opt.beta1.powf(t), 1.0 - opt.beta2.powf(t));
            let upd = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                *w -= opt.lr * (*m / bc1) / ((*v / bc2).sqrt() + opt.eps);
            };
            for c in 0..l.w.len() {
                upd(&mut l.w[c], &mut l.m_w[c], &mut l.v_w[c], g.w[k][c]);
            }
            for j in 0..l.out_dim {
                upd(&mut l.b[j], &mut l.m_b[j], &mut l.v_b[j], g.b[k][j]);
            }
        }
    }

    /// One batch restricted to given active sets: only active neurons are
    /// computed, softmax runs over the active output neurons, and Adam
    /// updates only parameters that received a gradient contribution
    /// (active rows, restricted to each sample's stored input coordinates).
    ///
    /// `inputs[s]` is a sparse input `(index, value)` list; `active[k][s]`
    /// holds sorted global neuron ids of layer `k` for sample `s`.
    pub fn sparse_step(
        &mut self,
        inputs: &[(Vec<(u32, f64)>, Vec<u32>)],
        active: &[Vec<Vec<u32>>],
        opt: Adam,
    ) {
        let nl = self.layers.len();
        let mut gw: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.out_dim]).collect();
        let mut tw: Vec<Vec<bool>> = self.layers.iter().map(|l| vec![false; l.w.len()]).collect();
        let mut tb: Vec<Vec<bool>> = self.layers.iter().map(|l| vec![false; l.out_dim]).collect();

        for (s, (x, labels)) in inputs.iter().enumerate() {
            // per layer: (ids, activations)
            let mut sparse_in: Vec<Vec<(u32, f64)>> = vec![x.clone()];
            for k in 0..nl {
                let l = &self.layers[k];
                let prev = &sparse_in[k];
                let out = active[k][s]
                    .iter()
                    .map(|&j| {
                        let j = j as usize;
                        let z = l.b[j] + prev.iter().map(|&(i, v)| l.w[j * l.in_dim + i as usize] * v).sum::<f64>();
                        (j as u32, if k + 1 < nl { z.max(0.0) } else { z })
                    })
                    .collect();
                sparse_in.push(out);
            }
            let logits: Vec<f64> = sparse_in[nl].iter().map(|&(_, v)| v).collect();
            let p = softmax(&logits);
            let mut delta: Vec<f64> = if labels.is_empty() {
                vec![0.0; p.len()]
            } else {
                sparse_in[nl]
                    .iter()
                    .zip(&p)
                    .map(|(&(j, _), pj)| pj - target(labels, j))
                    .collect()
            };
            for k in (0..nl).rev() {
                let l = &self.layers[k];
                let input = &sparse_in[k];
                for (&(j, _), &d) in sparse_in[k + 1].iter().zip(&delta) {
                    let j = j as usize;
                    gb[k][j] += d;
                    tb[k][j] = true;
                    for &(i, v) in input {
                        let c = j * l.in_dim + i as usize;
                        gw[k][c] += d * v;
                        tw[k][c] = true;
                    }
                }
                if k > 0 {
                    delta = input
                        .iter()
                        .map(|&(i, a)| {
                            if a <= 0.0 {
                                0.0
                            } else {
                                sparse_in[k + 1]
                                    .iter()
                                    .zip(&delta)
                                    .map(|(&(j, _), d)| d * l.w[j as usize * l.in_dim + i as usize])
                                    .sum()
                            }
                        })
                        .collect();
                }
            }
        }

        for (k, l) in self.layers.iter_mut().enumerate() {
            l.step += 1;
            let t = l.step as f64;
            let (bc1, bc2) = (1.0 - opt.beta1.powf(t), 1.0 - opt.beta2.powf(t));
            let upd = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                *w -= opt.lr * (*m / bc1) / ((*v / bc2).sqrt() + opt.eps);
            };
            for c in 0..l.w.len() {
                if tw[k][c] {
                    upd(&mut l.w[c], &mut l.m_w[c], &mut l.v_w[c], gw[k][c]);
                }
            }
            for j in 0..l.out_dim {
                if tb[k][j] {
                    upd(&mut l.b[j], &mut l.m_b[j], &mut l.v_b[j], gb[k][j]);
                }
            }
        }
    }
}

/// Largest `|a - b| / max(|a|, |b|)`, counting exact matches as zero.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x == y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Random unit vector of dimension `d`.
pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
