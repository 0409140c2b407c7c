//! Parameterized layers built on the tape, plus plain-vector wrappers.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Matrix, ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Allowed range for the policy's log standard deviation.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), group, input, output, bound, rng);
        let bias = store.uniform(format!("{name}.bias"), group, 1, output, bound, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        self.forward_with(tape, x, false)
    }

    /// With `frozen`, the layer's tensors collect no gradient.
    pub fn forward_with(&self, tape: &mut Tape<'_>, x: Var, frozen: bool) -> Var {
        let (w, b) = if frozen {
            (tape.param_frozen(self.weight), tape.param_frozen(self.bias))
        } else {
            (tape.param(self.weight), tape.param(self.bias))
        };
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of affine layers with ReLU between hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output, so
    /// `[8, 64, 64]` is two affine layers.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.forward_with(tape, x, false)
    }

    pub fn forward_with(&self, tape: &mut Tape<'_>, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let width = tape.shape(h).1;
            if width != layer.input {
                return Err(Error::config(format!(
                    "layer {i} expects input width {} but got {width}",
                    layer.input
                )));
            }
            h = layer.forward_with(tape, h, frozen);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Evaluates an MLP on one input vector.
pub fn mlp_forward(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.constant(row(input));
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).iter().copied().collect())
}

/// Hidden and cell vectors of an LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            hidden: vec![0.0; dim],
            cell: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.hidden.len()
    }
}

/// Standard LSTM cell. Gate blocks are laid out `[input, forget, candidate,
/// output]` along the columns of the fused weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.uniform(format!("{name}.w_input"), group, input, 4 * hidden, bound, rng);
        let w_hidden = store.uniform(format!("{name}.w_hidden"), group, hidden, 4 * hidden, bound, rng);
        let bias = store.uniform(format!("{name}.bias"), group, 1, 4 * hidden, bound, rng);
        Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        }
    }

    /// One step on a batch. Returns `(hidden, cell)`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (rows, width) = tape.shape(x);
        if width != self.input {
            return Err(Error::config(format!(
                "lstm expects input width {} but got {width}",
                self.input
            )));
        }
        if tape.shape(h) != (rows, self.hidden) || tape.shape(c) != (rows, self.hidden) {
            return Err(Error::config(format!(
                "lstm state must be {rows} x {}",
                self.hidden
            )));
        }
        let wi = tape.param(self.w_input);
        let wh = tape.param(self.w_hidden);
        let b = tape.param(self.bias);
        let xi = tape.matmul(x, wi);
        let hh = tape.matmul(h, wh);
        let pre = tape.add(xi, hh);
        let gates = tape.add_bias(pre, b);
        let n = self.hidden;
        let i_pre = tape.slice_cols(gates, 0, n);
        let f_pre = tape.slice_cols(gates, n, n);
        let g_pre = tape.slice_cols(gates, 2 * n, n);
        let o_pre = tape.slice_cols(gates, 3 * n, n);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        Ok((h_new, c_new))
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w_input, self.w_hidden, self.bias]
    }
}

/// One LSTM step on plain vectors.
pub fn lstm_step(store: &ParamStore, cell: &LstmCell, x: &[f64], state: &LstmState) -> Result<LstmState> {
    if state.hidden.len() != state.cell.len() {
        return Err(Error::config("lstm hidden and cell dimensions differ"));
    }
    let mut tape = Tape::new(store);
    let xv = tape.constant(row(x));
    let hv = tape.constant(row(&state.hidden));
    let cv = tape.constant(row(&state.cell));
    let (h, c) = cell.forward(&mut tape, xv, hv, cv)?;
    Ok(LstmState {
        hidden: tape.value(h).iter().copied().collect(),
        cell: tape.value(c).iter().copied().collect(),
    })
}

/// Numerically stable softmax of one vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::numeric("softmax input contains NaN"));
    }
    if logits.iter().any(|x| x.is_infinite()) {
        return Err(Error::numeric("softmax input is not finite"));
    }
    let mut out = logits.to_vec();
    super::tape::softmax_in_place(&mut out);
    Ok(out)
}

/// Tape variables for a reparameterized tanh-Gaussian sample.
#[derive(Debug, Clone, Copy)]
pub struct SquashedSample {
    /// `tanh(mean + std * noise)`, `rows x d`.
    pub action: Var,
    /// Log density including the tanh correction, `rows x 1`.
    pub log_prob: Var,
    /// `tanh(mean)`, the deterministic action.
    pub mode: Var,
}

/// Reparameterized sample given pre-clamp `log_std`. `noise` is a constant
/// standard-normal matrix of the same shape as `mean`.
pub fn squashed_gaussian(tape: &mut Tape<'_>, mean: Var, log_std_raw: Var, noise: Var) -> SquashedSample {
    let d = tape.shape(mean).1 as f64;
    let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
    let std = tape.exp(log_std);
    let spread = tape.mul(std, noise);
    let pre = tape.add(mean, spread);
    let action = tape.tanh(pre);
    let mode = tape.tanh(mean);

    // Gaussian term: sum(-noise^2/2 - log_std) - d/2 ln(2 pi)
    let noise_sq = {
        let n = tape.value(noise);
        n.mapv(|e| -0.5 * e * e).sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1))
    };
    let noise_term = tape.constant(noise_sq);
    let log_std_sum = tape.row_sum(log_std);
    let gauss = tape.sub(noise_term, log_std_sum);
    let gauss = tape.add_scalar(gauss, -0.5 * d * (2.0 * PI).ln());

    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
    let neg2u = tape.scale(pre, -2.0);
    let sp = tape.softplus(neg2u);
    let u_plus_sp = tape.add(pre, sp);
    let corr = tape.scale(u_plus_sp, -2.0);
    let corr = tape.add_scalar(corr, 2.0 * LN_2);
    let corr_sum = tape.row_sum(corr);
    let log_prob = tape.sub(gauss, corr_sum);
    SquashedSample { action, log_prob, mode }
}

/// Plain-vector squashed Gaussian sample: `(action, log_prob)`.
pub fn squashed_gaussian_sample(mean: &[f64], log_std: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64)> {
    if mean.len() != log_std.len() || mean.len() != noise.len() {
        return Err(Error::input("mean, log_std and noise must share a length"));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let m = tape.constant(row(mean));
    // -inf is legal input: clamping maps it to the lower bound.
    let ls = tape.constant(row(&log_std.iter().map(|v| v.max(LOG_STD_MIN)).collect::<Vec<_>>()));
    let n = tape.constant(row(noise));
    let s = squashed_gaussian(&mut tape, m, ls, n);
    let action = tape.value(s.action).iter().copied().collect();
    let lp = tape.value(s.log_prob)[[0, 0]];
    if !lp.is_finite() {
        return Err(Error::numeric("non-finite log probability"));
    }
    Ok((action, lp))
}

pub(crate) fn row(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, m: Matrix) {
        store.values_mut(id).assign(&m);
    }

    #[test]
    fn mlp_identity_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Free, &[2, 2], &mut rng);
        set(&mut store, mlp.layers[0].weight, array![[1.0, 0.0], [0.0, 1.0]]);
        set(&mut store, mlp.layers[0].bias, array![[0.0, 0.0]]);
        assert_eq!(mlp_forward(&store, &mlp, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn mlp_zero_weights_returns_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Free, &[4, 1], &mut rng);
        set(&mut store, mlp.layers[0].weight, Matrix::zeros((4, 1)));
        set(&mut store, mlp.layers[0].bias, array![[3.0]]);
        assert_eq!(mlp_forward(&store, &mlp, &[9.0, -2.0, 0.5, 1.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn two_layer_relu_composition() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Free, &[2, 2, 1], &mut rng);
        set(&mut store, mlp.layers[0].weight, array![[1.0, 0.0], [0.0, -1.0]]);
        set(&mut store, mlp.layers[0].bias, array![[0.0, 0.0]]);
        set(&mut store, mlp.layers[1].weight, array![[1.0], [1.0]]);
        set(&mut store, mlp.layers[1].bias, array![[0.0]]);
        // hidden = relu([2, -5]) = [2, 0]
        assert_eq!(mlp_forward(&store, &mlp, &[2.0, 5.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn mlp_dimension_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Free, &[3, 2], &mut rng);
        let err = mlp_forward(&store, &mlp, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("layer 0")), "{err}");
    }

    fn zero_cell(store: &mut ParamStore, input: usize, hidden: usize) -> LstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(store, "lstm", ParamGroup::Free, input, hidden, &mut rng);
        for id in cell.params() {
            store.values_mut(id).fill(0.0);
        }
        cell
    }

    #[test]
    fn lstm_zero_parameters_stay_zero() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 3, 2);
        let out = lstm_step(&store, &cell, &[1.0, -4.0, 2.5], &LstmState::zeros(2)).unwrap();
        assert_eq!(out, LstmState::zeros(2));
    }

    #[test]
    fn lstm_bias_only_matches_gate_equations() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 2, 1);
        // gate blocks: input, forget, candidate, output
        set(&mut store, cell.bias, array![[0.5, -1.0, 0.3, 2.0]]);
        let out = lstm_step(&store, &cell, &[0.0, 0.0], &LstmState::zeros(1)).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let c = sig(0.5) * 0.3f64.tanh();
        let h = sig(2.0) * c.tanh();
        assert!((out.cell[0] - c).abs() < 1e-15);
        assert!((out.hidden[0] - h).abs() < 1e-15);
    }

    #[test]
    fn lstm_is_deterministic_and_bounded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = LstmCell::new(&mut store, "lstm", ParamGroup::Free, 3, 4, &mut rng);
        let state = LstmState {
            hidden: vec![0.1, -0.2, 0.3, 0.9],
            cell: vec![3.0, -2.0, 0.0, 1.0],
        };
        let a = lstm_step(&store, &cell, &[5.0, -5.0, 1.0], &state).unwrap();
        let b = lstm_step(&store, &cell, &[5.0, -5.0, 1.0], &state).unwrap();
        assert_eq!(a, b);
        assert!(a.hidden.iter().all(|h| h.abs() < 1.0));
    }

    #[test]
    fn lstm_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 3, 2);
        assert!(matches!(
            lstm_step(&store, &cell, &[1.0], &LstmState::zeros(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn squashed_gaussian_deterministic_limit() {
        let (a, _) = squashed_gaussian_sample(&[0.0, 0.0], &[f64::NEG_INFINITY; 2], &[1.3, -0.4]).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn squashed_gaussian_log_prob_at_origin_is_standard_normal() {
        let (a, lp) = squashed_gaussian_sample(&[0.0], &[0.0], &[0.0]).unwrap();
        assert_eq!(a, vec![0.0]);
        let expected = -0.5 * (2.0 * PI).ln();
        assert!((lp - expected).abs() < 1e-14);
    }

    #[test]
    fn squashed_gaussian_matches_change_of_variables() {
        let (mean, ls, noise) = ([0.3, -1.2], [-0.5, 0.7], [0.8, -1.1]);
        let (a, lp) = squashed_gaussian_sample(&mean, &ls, &noise).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            let std = f64::exp(ls[i]);
            let u = mean[i] + std * noise[i];
            assert!((a[i] - u.tanh()).abs() < 1e-15);
            expected += -0.5 * noise[i] * noise[i] - ls[i] - 0.5 * (2.0 * PI).ln();
            expected -= (1.0 - u.tanh().powi(2)).ln();
        }
        assert!((lp - expected).abs() < 1e-10);
        assert_eq!(squashed_gaussian_sample(&mean, &ls, &noise).unwrap(), (a, lp));
    }
}
