//! Toy MLP: `L` blocks of `y = tanh(W x + b)` with `W` an `h x h` matrix,
//! trained with mean squared error against a fixed random teacher.
//!
//! Block parameters are laid out as `W` row-major followed by `b`. Batches are
//! row-major `batch x h`. Activations and gradients are computed in f64 from
//! f32 parameters; gradients leave as f32.

use crate::optimizer::store::StoreLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub layers: usize,
    pub hidden: usize,
}

impl MlpShape {
    pub fn block_params(&self) -> usize {
        self.hidden * self.hidden + self.hidden
    }

    pub fn total_params(&self) -> usize {
        self.layers * self.block_params()
    }

    pub fn layout(&self) -> StoreLayout {
        StoreLayout::from_counts(&vec![self.block_params(); self.layers])
    }

    /// Splits a flat parameter vector into per-block slices.
    pub fn blocks<'a, P>(&self, flat: &'a [P]) -> Vec<&'a [P]> {
        assert_eq!(flat.len(), self.total_params());
        flat.chunks(self.block_params()).collect()
    }
}

pub fn block_forward<P: Copy + Into<f64>>(params: &[P], x: &[f64], hidden: usize) -> Vec<f64> {
    let h = hidden;
    assert_eq!(params.len(), h * h + h);
    assert_eq!(x.len() % h, 0);
    let (w, b) = params.split_at(h * h);
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(h) {
        for i in 0..h {
            let mut z: f64 = b[i].into();
            for (j, xj) in row.iter().enumerate() {
                z += w[i * h + j].into() * xj;
            }
            y.push(z.tanh());
        }
    }
    y
}

/// Loss contribution `sum (y - t)^2 / (global_batch * h)` and its gradient
/// with respect to `y`.
pub fn loss_and_grad(y: &[f64], t: &[f64], global_batch: usize, hidden: usize) -> (f64, Vec<f64>) {
    assert_eq!(y.len(), t.len());
    let scale = 1.0 / (global_batch * hidden) as f64;
    let mut loss = 0.0;
    let mut dy = Vec::with_capacity(y.len());
    for (yi, ti) in y.iter().zip(t) {
        let d = yi - ti;
        loss += d * d;
        dy.push(2.0 * d * scale);
    }
    (loss * scale, dy)
}

/// Gradient of the loss with respect to the block parameters and the block
/// input, given the gradient `dy` with respect to its output. The output is
/// recomputed from `params`.
pub fn block_backward<P: Copy + Into<f64>>(params: &[P], x: &[f64], dy: &[f64], hidden: usize) -> (Vec<f64>, Vec<f64>) {
    let h = hidden;
    let y = block_forward(params, x, h);
    let w = &params[..h * h];
    let mut grad = vec![0.0f64; h * h + h];
    let mut dx = vec![0.0f64; x.len()];
    for (r, row) in x.chunks(h).enumerate() {
        for i in 0..h {
            let yi = y[r * h + i];
            let dz = dy[r * h + i] * (1.0 - yi * yi);
            for j in 0..h {
                grad[i * h + j] += dz * row[j];
                dx[r * h + j] += w[i * h + j].into() * dz;
            }
            grad[h * h + i] += dz;
        }
    }
    (grad, dx)
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Full forward and backward pass over one shard. Returns the shard's loss
/// contribution and per-block gradients.
pub fn shard_pass<P: Copy + Into<f64>>(
    shape: &MlpShape,
    blocks: &[&[P]],
    x: &[f64],
    t: &[f64],
    global_batch: usize,
) -> (f64, Vec<Vec<f64>>) {
    let h = shape.hidden;
    let mut acts = Vec::with_capacity(shape.layers);
    let mut a = x.to_vec();
    for p in blocks {
        let y = block_forward(p, &a, h);
        acts.push(std::mem::replace(&mut a, y));
    }
    let (loss, mut dy) = loss_and_grad(&a, t, global_batch, h);
    let mut grads = vec![Vec::new(); shape.layers];
    for l in (0..shape.layers).rev() {
        let (g, dx) = block_backward(blocks[l], &acts[l], &dy, h);
        grads[l] = g;
        dy = dx;
    }
    (loss, grads)
}

/// Gradient of the shard loss with respect to one block's parameters.
pub fn local_grad(shape: &MlpShape, blocks: &[&[f32]], block: usize, x: &[f64], t: &[f64], global_batch: usize) -> Vec<f32> {
    to_f32(&shard_pass(shape, blocks, x, t, global_batch).1[block])
}

/// Seeded regression data: inputs uniform in `[-1, 1)`, targets
/// `teacher_scale * tanh(T x)` for a random `T`.
#[derive(Debug, Clone)]
pub struct Dataset {
    hidden: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn generate(seed: u64, samples: usize, hidden: usize, teacher_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let teacher: Vec<f64> = (0..hidden * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        let inputs: Vec<f64> = (0..samples * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut targets = Vec::with_capacity(inputs.len());
        for row in inputs.chunks(hidden) {
            for i in 0..hidden {
                let z: f64 = (0..hidden).map(|j| teacher[i * hidden + j] * row[j]).sum();
                targets.push(teacher_scale * z.tanh());
            }
        }
        Dataset { hidden, inputs, targets }
    }

    pub fn samples(&self) -> usize {
        self.inputs.len() / self.hidden
    }

    /// Worker `worker`'s slice of round `round`'s global batch. The global
    /// batch is `workers * batch_per_worker` consecutive samples, wrapping
    /// around the pool.
    pub fn shard(&self, round: u64, worker: usize, workers: usize, batch_per_worker: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.samples();
        let h = self.hidden;
        let global = (workers * batch_per_worker) as u64;
        let mut x = Vec::with_capacity(batch_per_worker * h);
        let mut t = Vec::with_capacity(batch_per_worker * h);
        for j in 0..batch_per_worker {
            let idx = ((round * global + (worker * batch_per_worker + j) as u64) % n as u64) as usize;
            x.extend_from_slice(&self.inputs[idx * h..(idx + 1) * h]);
            t.extend_from_slice(&self.targets[idx * h..(idx + 1) * h]);
        }
        (x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_tanh_of_bias() {
        let h = 4;
        let mut p = vec![0.0f32; h * h + h];
        let y = block_forward(&p, &[0.3, -0.2, 0.9, 0.1], h);
        assert_eq!(y, vec![0.0; 4]);
        p[h * h + 2] = 0.5;
        let y = block_forward(&p, &[0.3, -0.2, 0.9, 0.1], h);
        assert_eq!(y[2], 0.5f64.tanh());
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let shape = MlpShape { layers: 1, hidden: 3 };
        let p: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.5).collect();
        let g = local_grad(&shape, &shape.blocks(&p), 0, &[0.0; 6], &[1.0; 6], 2);
        assert!(g[..9].iter().all(|&v| v == 0.0));
        assert!(g[9..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_shapes_match_blocks() {
        let shape = MlpShape { layers: 3, hidden: 5 };
        let p = vec![0.1f32; shape.total_params()];
        let (_, grads) = shard_pass(&shape, &shape.blocks(&p), &[0.2; 10], &[0.0; 10], 2);
        assert!(grads.iter().all(|g| g.len() == shape.block_params()));
    }

    #[test]
    fn shards_partition_the_global_batch() {
        let d = Dataset::generate(1, 50, 3, 1.0);
        let (b, n) = (4, 3);
        let mut union = Vec::new();
        for w in 0..n {
            union.extend(d.shard(2, w, n, b).0);
        }
        let (all, _) = d.shard(2, 0, 1, b * n);
        assert_eq!(union, all);
    }

    #[test]
    fn zero_teacher_gives_zero_targets() {
        let d = Dataset::generate(3, 10, 4, 0.0);
        assert!(d.shard(0, 0, 1, 10).1.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn shard_losses_sum_to_global_loss() {
        let shape = MlpShape { layers: 2, hidden: 4 };
        let d = Dataset::generate(5, 64, 4, 1.0);
        let p: Vec<f32> = (0..shape.total_params()).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.05).collect();
        let blocks = shape.blocks(&p);
        let (n, b) = (4, 3);
        let parts: f64 = (0..n)
            .map(|w| {
                let (x, t) = d.shard(1, w, n, b);
                shard_pass(&shape, &blocks, &x, &t, n * b).0
            })
            .sum();
        let (x, t) = d.shard(1, 0, 1, n * b);
        let whole = shard_pass(&shape, &blocks, &x, &t, n * b).0;
        assert!((parts - whole).abs() < 1e-12);
    }
}
