//! Fully connected tanh network with exact input derivatives and exact
//! parameter gradients of losses built from those derivatives.
//!
//! The forward pass pushes a batch of points together with their input
//! tangents (one per input direction) through the layers:
//!
//! ```text
//! z = W a_prev + b        a   = tanh(z)
//! z' = W a'_prev          a'  = (1 - a^2) z'
//! ```
//!
//! so the output rows hold `phi` and every `d phi / d s_j`. The reverse pass
//! differentiates this whole computation, which gives gradients of losses that
//! depend on `phi_t` and `grad(phi)` with respect to the weights.
//!
//! Activations are stored row-per-sample in blocks: rows `0..n` are values,
//! rows `n(1+j)..n(2+j)` are tangents along input `j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// Offset of each layer's weight block in `params`; biases follow it.
    offsets: Vec<usize>,
    /// Fixed affine map applied to inputs before the first layer.
    input_scale: Vec<f64>,
    input_offset: Vec<f64>,
}

/// Default hidden layout: three layers of fifty units.
pub fn default_layer_sizes(input_dim: usize) -> Vec<usize> {
    vec![input_dim, 50, 50, 50, 1]
}

fn layer_offsets(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for w in sizes.windows(2) {
        offsets.push(at);
        at += w[0] * w[1] + w[1];
    }
    (offsets, at)
}

/// `c = a b + beta c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, q: usize| (r - 1) * rs + (q - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len() && last(rsb, csb, k, n) < b.len());
    }
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above keep every strided access in bounds, and `c`
    // is exclusively borrowed while `a` and `b` are shared borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    n: usize,
    ntan: usize,
    /// Input to each layer (normalised points first, then hidden activations).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    /// Output rows: `n` values followed by `n * ntan` tangents.
    out: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.out[..self.n]
    }

    /// `d phi / d s_j` for every point.
    pub fn derivative(&self, j: usize) -> &[f64] {
        assert!(j < self.ntan, "tape built without tangent {j}");
        &self.out[self.n * (1 + j)..self.n * (2 + j)]
    }

    /// Number of output rows (`n * (1 + ntan)`), the length of the upstream
    /// gradient passed to [`Mlp::backward`].
    pub fn rows(&self) -> usize {
        self.out.len()
    }
}

impl Mlp {
    /// Xavier-uniform weights on `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_xavier(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..model.num_layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = model.offsets[l];
            for w in &mut model.params[off..off + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::Shape("the network must have a single output".into()));
        }
        let (offsets, total) = layer_offsets(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; total],
            offsets,
            input_scale: vec![1.0; sizes[0]],
            input_offset: vec![0.0; sizes[0]],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "layer sizes {sizes:?} need {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    /// Maps each input coordinate's `[lo, hi]` onto `[-1, 1]` before the first layer.
    pub fn set_input_box(&mut self, ranges: &[(f64, f64)]) -> Result<()> {
        check_dim(self.input_dim(), ranges.len())?;
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            if !(hi > lo) {
                return Err(Error::Config(format!("input range {k} is empty")));
            }
            self.input_scale[k] = 2.0 / (hi - lo);
            self.input_offset[k] = -(hi + lo) / (hi - lo);
        }
        Ok(())
    }

    pub fn set_input_affine(&mut self, scale: Vec<f64>, offset: Vec<f64>) -> Result<()> {
        check_dim(self.input_dim(), scale.len())?;
        check_dim(self.input_dim(), offset.len())?;
        self.input_scale = scale;
        self.input_offset = offset;
        Ok(())
    }

    pub fn input_affine(&self) -> (&[f64], &[f64]) {
        (&self.input_scale, &self.input_offset)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flattened parameters: per layer, row-major `(out x in)` weights then biases.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let off = self.offsets[l];
        &self.params[off..off + self.sizes[l] * self.sizes[l + 1]]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let off = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        &self.params[off..off + self.sizes[l + 1]]
    }

    /// Range of `params` holding layer `l`'s weights, then its biases.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off = self.offsets[l];
        let nw = self.sizes[l] * self.sizes[l + 1];
        (off..off + nw, off + nw..off + nw + self.sizes[l + 1])
    }

    /// Forward pass over `n` points stored flat in `points`; with `tangents`
    /// the tape also carries every input derivative.
    pub fn forward_tape(&self, points: &[f64], tangents: bool) -> Tape {
        let din = self.input_dim();
        assert_eq!(
            points.len() % din,
            0,
            "point buffer not a multiple of the input size"
        );
        let n = points.len() / din;
        let ntan = if tangents { din } else { 0 };
        let rows = n * (1 + ntan);

        let mut x0 = vec![0.0; rows * din];
        for i in 0..n {
            for k in 0..din {
                x0[i * din + k] = self.input_scale[k] * points[i * din + k] + self.input_offset[k];
            }
        }
        for j in 0..ntan {
            for i in 0..n {
                x0[(n * (1 + j) + i) * din + j] = self.input_scale[j];
            }
        }

        let nl = self.num_layers();
        let mut inputs = Vec::with_capacity(nl);
        let mut pre = Vec::with_capacity(nl - 1);
        inputs.push(x0);
        for l in 0..nl {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let x = inputs.last().unwrap();
            let mut z = vec![0.0; rows * fo];
            gemm(
                rows,
                fi,
                fo,
                x,
                (fi, 1),
                self.weights(l),
                (1, fi),
                0.0,
                &mut z,
                (fo, 1),
            );
            let b = self.biases(l);
            for row in z[..n * fo].chunks_exact_mut(fo) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            if l + 1 == nl {
                return Tape {
                    n,
                    ntan,
                    inputs,
                    pre,
                    out: z,
                };
            }
            let mut a = vec![0.0; rows * fo];
            let (av, at) = a.split_at_mut(n * fo);
            for (o, &zz) in av.iter_mut().zip(&z[..n * fo]) {
                *o = zz.tanh();
            }
            for j in 0..ntan {
                let zt = &z[n * fo * (1 + j)..n * fo * (2 + j)];
                let ot = &mut at[n * fo * j..n * fo * (j + 1)];
                for ((o, &zz), &aa) in ot.iter_mut().zip(zt).zip(av.iter()) {
                    *o = (1.0 - aa * aa) * zz;
                }
            }
            pre.push(z);
            inputs.push(a);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Accumulates into `grad` the parameter gradient of `sum_r upstream[r] * out[r]`
    /// where `out` are the tape's output rows.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grad: &mut [f64]) {
        assert_eq!(upstream.len(), tape.rows());
        assert_eq!(grad.len(), self.params.len());
        let (n, ntan) = (tape.n, tape.ntan);
        let rows = n * (1 + ntan);
        let nl = self.num_layers();
        let mut zbar = upstream.to_vec();
        for l in (0..nl).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let x = &tape.inputs[l];
            let (wr, br) = self.layer_ranges(l);
            gemm(
                fo,
                rows,
                fi,
                &zbar,
                (1, fo),
                x,
                (fi, 1),
                1.0,
                &mut grad[wr],
                (fi, 1),
            );
            let gb = &mut grad[br];
            for row in zbar[..n * fo].chunks_exact(fo) {
                for (g, z) in gb.iter_mut().zip(row) {
                    *g += z;
                }
            }
            if l == 0 {
                break;
            }
            // Gradient with respect to the previous layer's activations.
            let mut abar = vec![0.0; rows * fi];
            gemm(
                rows,
                fo,
                fi,
                &zbar,
                (fo, 1),
                self.weights(l),
                (fi, 1),
                0.0,
                &mut abar,
                (fi, 1),
            );
            // Through a = tanh(z) and a' = (1 - a^2) z'.
            let a = &tape.inputs[l];
            let z = &tape.pre[l - 1];
            let mut next = vec![0.0; rows * fi];
            let m = n * fi;
            for idx in 0..m {
                let av = a[idx];
                let s = 1.0 - av * av;
                let mut zv = s * abar[idx];
                for j in 0..ntan {
                    let t = m * (1 + j) + idx;
                    next[t] = s * abar[t];
                    zv += abar[t] * z[t] * (-2.0 * av * s);
                }
                next[idx] = zv;
            }
            zbar = next;
        }
    }

    /// `phi(s)` for one point.
    pub fn forward(&self, s: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), s.len())?;
        Ok(self.forward_tape(s, false).out[0])
    }

    /// `(d phi / d s_1, ..., d phi / d s_d)` at one point.
    pub fn input_jacobian(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), s.len())?;
        let tape = self.forward_tape(s, true);
        Ok((0..s.len()).map(|j| tape.derivative(j)[0]).collect())
    }

    /// Values at many points stored flat, evaluated in parallel chunks.
    pub fn eval_batch(&self, points: &[f64]) -> Vec<f64> {
        use rayon::prelude::*;
        let din = self.input_dim();
        points
            .par_chunks(CHUNK * din)
            .flat_map_iter(|c| self.forward_tape(c, false).out)
            .collect()
    }

    /// Sum over layers of the Euclidean norms of the weights and of the biases.
    pub fn regularization(&self) -> f64 {
        (0..self.num_layers())
            .map(|l| norm(self.weights(l)) + norm(self.biases(l)))
            .sum()
    }

    /// Adds `scale * d(regularization)/d(params)` to `grad`; zero blocks contribute nothing.
    pub fn regularization_grad(&self, scale: f64, grad: &mut [f64]) {
        for l in 0..self.num_layers() {
            let (wr, br) = self.layer_ranges(l);
            for r in [wr, br] {
                let nrm = norm(&self.params[r.clone()]);
                if nrm > 0.0 {
                    for i in r {
                        grad[i] += scale * self.params[i] / nrm;
                    }
                }
            }
        }
    }
}

/// Points per work unit in batched evaluation. Fixed, so that reductions are
/// ordered the same way regardless of the thread count.
pub const CHUNK: usize = 256;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn xavier_bounds_and_determinism() {
        let sizes = [3, 50, 50, 50, 1];
        let a = Mlp::init_xavier(&sizes, 7).unwrap();
        let b = Mlp::init_xavier(&sizes, 7).unwrap();
        let c = Mlp::init_xavier(&sizes, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        for l in 0..a.num_layers() {
            let bound = (6.0 / (sizes[l] + sizes[l + 1]) as f64).sqrt();
            assert!(a.weights(l).iter().all(|w| w.abs() <= bound));
            assert!(a.biases(l).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn xavier_variance() {
        let m = Mlp::init_xavier(&[100, 100, 1], 3).unwrap();
        let w = m.weights(0);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 200.0;
        assert!((var / expect - 1.0).abs() < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn forward_examples() {
        let zero = Mlp::zeros(&[3, 5, 1]).unwrap();
        assert_eq!(zero.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
        let tiny = Mlp::from_params(&[1, 1, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tiny.forward(&[0.0]).unwrap(), 0.0);
        assert_relative_eq!(tiny.forward(&[0.5]).unwrap(), 0.5f64.tanh());
        let linear = Mlp::from_params(&[3, 1], vec![2.0, -1.0, 0.5, 0.25]).unwrap();
        assert_eq!(linear.forward(&[1.0, 1.0, 2.0]).unwrap(), 2.25);
        assert_eq!(
            linear.input_jacobian(&[7.0, 8.0, 9.0]).unwrap(),
            vec![2.0, -1.0, 0.5]
        );
        assert!(zero.forward(&[1.0]).is_err());
    }

    #[test]
    fn output_bounded_by_last_layer() {
        let m = Mlp::init_xavier(&[2, 8, 8, 1], 1).unwrap();
        let l = m.num_layers() - 1;
        let bound: f64 = m.weights(l).iter().map(|w| w.abs()).sum::<f64>() + m.biases(l)[0].abs();
        for s in [[0.0, 0.0], [100.0, -50.0], [1e6, 1e6]] {
            let v = m.forward(&s).unwrap();
            assert!(v.is_finite() && v.abs() <= bound);
        }
    }

    #[test]
    fn constant_network_has_zero_gradient() {
        let mut m = Mlp::init_xavier(&[2, 6, 1], 4).unwrap();
        let (wr, _) = m.layer_ranges(0);
        m.params_mut()[wr].fill(0.0);
        assert_eq!(m.input_jacobian(&[0.3, 0.4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn input_box_normalises() {
        let mut m = Mlp::from_params(&[2, 1], vec![1.0, 1.0, 0.0]).unwrap();
        m.set_input_box(&[(0.0, 4.0), (-1.0, 1.0)]).unwrap();
        assert_eq!(m.forward(&[4.0, 1.0]).unwrap(), 2.0);
        assert_eq!(m.forward(&[2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.input_jacobian(&[1.0, 0.5]).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn batched_matches_pointwise() {
        let mut m = Mlp::init_xavier(&[3, 7, 5, 1], 11).unwrap();
        m.set_input_box(&[(-1.0, 2.0), (0.0, 1.0), (0.0, 10.0)])
            .unwrap();
        let pts: Vec<f64> = (0..600)
            .map(|i| ((i * 37) % 101) as f64 / 50.0 - 0.5)
            .collect();
        let batch = m.eval_batch(&pts);
        let tape = m.forward_tape(&pts, true);
        for (i, p) in pts.chunks(3).enumerate() {
            let v = m.forward(p).unwrap();
            assert_relative_eq!(batch[i], v, epsilon = 1e-14);
            let g = m.input_jacobian(p).unwrap();
            for j in 0..3 {
                assert_relative_eq!(tape.derivative(j)[i], g[j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(Mlp::zeros(&[2, 3, 1]).unwrap().regularization(), 0.0);
        let m = Mlp::from_params(&[2, 1], vec![3.0, 4.0, 0.0]).unwrap();
        assert_eq!(m.regularization(), 5.0);
        let p: Vec<f64> = Mlp::init_xavier(&[2, 4, 1], 0).unwrap().params().to_vec();
        let a = Mlp::from_params(&[2, 4, 1], p.clone()).unwrap();
        let b = Mlp::from_params(&[2, 4, 1], p.iter().map(|x| 2.0 * x).collect()).unwrap();
        assert_relative_eq!(
            b.regularization(),
            2.0 * a.regularization(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar J = sum_r c_r out_r mixes values and tangents, so the check
        // covers the second-order path.
        let mut m = Mlp::init_xavier(&[3, 6, 5, 1], 2).unwrap();
        m.set_input_box(&[(-1.0, 1.0), (0.0, 2.0), (0.0, 5.0)])
            .unwrap();
        for b in m.params_mut().iter_mut().skip(20).step_by(7) {
            *b += 0.1;
        }
        let pts = [0.2, 0.5, 1.0, -0.7, 1.9, 4.0, 0.9, 0.1, 2.5];
        let tape = m.forward_tape(&pts, true);
        let c: Vec<f64> = (0..tape.rows())
            .map(|r| ((r * 13) % 7) as f64 - 3.0)
            .collect();
        let objective = |model: &Mlp| -> f64 {
            let t = model.forward_tape(&pts, true);
            t.out.iter().zip(&c).map(|(o, w)| o * w).sum()
        };
        let mut grad = vec![0.0; m.num_params()];
        m.backward(&tape, &c, &mut grad);
        let h = 1e-6;
        for i in 0..m.num_params() {
            let mut p = m.clone();
            p.params_mut()[i] += h;
            let up = objective(&p);
            p.params_mut()[i] -= 2.0 * h;
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::zeros(&[2, 3, 2]).is_err());
        assert!(Mlp::from_params(&[2, 1], vec![1.0]).is_err());
        assert!(Mlp::from_params(&[2, 1], vec![1.0, f64::NAN, 0.0]).is_err());
    }
}
