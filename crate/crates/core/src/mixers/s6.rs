use ndarray::Array2;
use rand::Rng;

use super::init_uniform;
use crate::autodiff::{ParamVars, Real, Tape, Unary, Var};
use crate::error::{MnoError, Result};
use crate::params::{ParamId, ParamStore};

/// Rates are kept at or below this value during training.
pub const A_DIAG_MAX: f64 = -1e-4;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Data-dependent selection maps producing `(B, C, Δ_pre)` from the
/// expanded stream. `Δ = softplus(Δ_pre)` is applied by the caller.
#[derive(Clone, Debug)]
pub struct SelectionProj {
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
}

impl SelectionProj {
    fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d_inner: usize, d_state: usize, rng: &mut R) -> Self {
        let w_b = store.add(format!("{prefix}.w_b"), init_uniform(rng, d_inner, d_state, d_inner));
        let w_c = store.add(format!("{prefix}.w_c"), init_uniform(rng, d_inner, d_state, d_inner));
        let w_delta = store.add(format!("{prefix}.w_delta"), init_uniform(rng, d_inner, d_inner, d_inner));
        // softplus(bias) log-uniform in [DT_MIN, DT_MAX]
        let bias = Array2::from_shape_fn((1, d_inner), |_| {
            let dt = (rng.random_range(DT_MIN.ln()..DT_MAX.ln())).exp();
            T::of(dt + (-(-dt).exp_m1()).ln())
        });
        let delta_bias = store.add(format!("{prefix}.delta_bias"), bias);
        SelectionProj { w_b, w_c, w_delta, delta_bias }
    }

    /// `(B, C, Δ_pre)` for the expanded stream `u`.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, u: Var) -> (Var, Var, Var) {
        let b = tape.matmul(u, pv.get(self.w_b));
        let c = tape.matmul(u, pv.get(self.w_c));
        let d = tape.matmul(u, pv.get(self.w_delta));
        let d = tape.add_row(d, pv.get(self.delta_bias));
        (b, c, d)
    }
}

fn init_a_diag<T: Real>(d_inner: usize, d_state: usize) -> Array2<T> {
    Array2::from_shape_fn((d_inner, d_state), |(_, k)| T::of(-((k + 1) as f64)))
}

/// Selective state-space block: expand `D → E`, select `(B, C, Δ)` per token,
/// scan, gate with `silu(x W_gate)`, contract `E → D`.
#[derive(Clone, Debug)]
pub struct S6BlockParams {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub w_in: ParamId,
    pub gate: ParamId,
    pub select: SelectionProj,
    pub a_diag: ParamId,
    pub d_skip: ParamId,
    pub w_out: ParamId,
    /// Activation on the expanded stream before the scan.
    pub inner_activation: Unary,
    /// Multiply the scan output by `silu(x W_gate)`.
    pub gated: bool,
}

impl S6BlockParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Self {
        let w_in = store.add(format!("{prefix}.w_in"), init_uniform(rng, d_model, d_inner, d_model));
        let gate = store.add(format!("{prefix}.gate"), init_uniform(rng, d_model, d_inner, d_model));
        let select = SelectionProj::init(store, &format!("{prefix}.select"), d_inner, d_state, rng);
        let a_diag = store.add_bounded(format!("{prefix}.a_diag"), init_a_diag(d_inner, d_state), A_DIAG_MAX);
        let d_skip = store.add(format!("{prefix}.d_skip"), Array2::ones((1, d_inner)));
        let w_out = store.add(format!("{prefix}.w_out"), init_uniform(rng, d_inner, d_model, d_inner));
        S6BlockParams {
            d_model,
            d_inner,
            d_state,
            w_in,
            gate,
            select,
            a_diag,
            d_skip,
            w_out,
            inner_activation: Unary::Silu,
            gated: true,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Var {
        let xe = tape.matmul(x, pv.get(self.w_in));
        let u = tape.unary(xe, self.inner_activation);
        let (b, c, dpre) = self.select.forward(tape, pv, u);
        let delta = tape.unary(dpre, Unary::Softplus);
        let y = tape.selective_scan(u, delta, b, c, pv.get(self.a_diag), pv.get(self.d_skip));
        finish(tape, pv, x, y, self.gate, self.w_out, self.gated)
    }

    /// Evaluate the block on a standalone `L × D` matrix.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Result<Array2<T>> {
        check_tokens(x, self.d_model)?;
        let mut tape = Tape::new();
        let pv = tape.bind_params(store);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &pv, xv);
        finite_output(tape.value(out))
    }
}

fn finish<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, x: Var, y: Var, gate: ParamId, w_out: ParamId, gated: bool) -> Var {
    let y = if gated {
        let z = tape.matmul(x, pv.get(gate));
        let z = tape.unary(z, Unary::Silu);
        tape.mul(y, z)
    } else {
        y
    };
    tape.matmul(y, pv.get(w_out))
}

fn check_tokens<T: Real>(x: &Array2<T>, d_model: usize) -> Result<()> {
    if x.ncols() != d_model {
        return Err(MnoError::invalid(format!("input width {} != d_model {d_model}", x.ncols())));
    }
    if x.nrows() == 0 {
        return Err(MnoError::invalid("empty token sequence"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MnoError::invalid("non-finite input tokens"));
    }
    Ok(())
}

fn finite_output<T: Real>(y: &Array2<T>) -> Result<Array2<T>> {
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(MnoError::Divergence { step: 0, what: format!("non-finite block activation at flat index {pos}") });
    }
    Ok(y.clone())
}

/// Cross selective block: `(B, C, Δ)` from `x` and `(B', C', Δ')` from `x'`
/// through independent selection maps, combined as `B̃ = B + qB'`,
/// `C̃ = C + qC'`, `Δ̃ = softplus(Δ_pre + qΔ'_pre)`, then scanned over the `x`
/// stream.
#[derive(Clone, Debug)]
pub struct CrossS6BlockParams {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub w_in: ParamId,
    pub gate: ParamId,
    pub select_x: SelectionProj,
    pub select_xp: SelectionProj,
    /// Mixing ratio, a frozen `1 × 1` parameter.
    pub q: ParamId,
    pub a_diag: ParamId,
    pub d_skip: ParamId,
    pub w_out: ParamId,
    pub inner_activation: Unary,
    pub gated: bool,
}

impl CrossS6BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        q: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(q >= 0.0) || !q.is_finite() {
            return Err(MnoError::invalid(format!("mixing ratio q must be finite and non-negative, got {q}")));
        }
        let w_in = store.add(format!("{prefix}.w_in"), init_uniform(rng, d_model, d_inner, d_model));
        let gate = store.add(format!("{prefix}.gate"), init_uniform(rng, d_model, d_inner, d_model));
        let select_x = SelectionProj::init(store, &format!("{prefix}.select_x"), d_inner, d_state, rng);
        let select_xp = SelectionProj::init(store, &format!("{prefix}.select_xp"), d_inner, d_state, rng);
        let q = store.add_frozen(format!("{prefix}.q"), Array2::from_elem((1, 1), T::of(q)));
        let a_diag = store.add_bounded(format!("{prefix}.a_diag"), init_a_diag(d_inner, d_state), A_DIAG_MAX);
        let d_skip = store.add(format!("{prefix}.d_skip"), Array2::ones((1, d_inner)));
        let w_out = store.add(format!("{prefix}.w_out"), init_uniform(rng, d_inner, d_model, d_inner));
        Ok(CrossS6BlockParams {
            d_model,
            d_inner,
            d_state,
            w_in,
            gate,
            select_x,
            select_xp,
            q,
            a_diag,
            d_skip,
            w_out,
            inner_activation: Unary::Silu,
            gated: true,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, x_prime: Var) -> Var {
        let xe = tape.matmul(x, pv.get(self.w_in));
        let u = tape.unary(xe, self.inner_activation);
        let (b, c, dpre) = self.select_x.forward(tape, pv, u);
        let xpe = tape.matmul(x_prime, pv.get(self.w_in));
        let up = tape.unary(xpe, self.inner_activation);
        let (bp, cp, dpre_p) = self.select_xp.forward(tape, pv, up);
        let q = pv.get(self.q);
        let bp = tape.scale_by(bp, q);
        let b = tape.add(b, bp);
        let cp = tape.scale_by(cp, q);
        let c = tape.add(c, cp);
        let dp = tape.scale_by(dpre_p, q);
        let dpre = tape.add(dpre, dp);
        let delta = tape.unary(dpre, Unary::Softplus);
        let y = tape.selective_scan(u, delta, b, c, pv.get(self.a_diag), pv.get(self.d_skip));
        finish(tape, pv, x, y, self.gate, self.w_out, self.gated)
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Array2<T>, x_prime: &Array2<T>) -> Result<Array2<T>> {
        check_tokens(x, self.d_model)?;
        check_tokens(x_prime, self.d_model)?;
        if x.nrows() != x_prime.nrows() {
            return Err(MnoError::invalid(format!(
                "stream lengths differ: {} vs {}",
                x.nrows(),
                x_prime.nrows()
            )));
        }
        let mut tape = Tape::new();
        let pv = tape.bind_params(store);
        let xv = tape.constant(x.clone());
        let xpv = tape.constant(x_prime.clone());
        let out = self.forward(&mut tape, &pv, xv, xpv);
        finite_output(tape.value(out))
    }

    /// The S6 block sharing this block's weights and its `x` selection map.
    pub fn as_s6(&self) -> S6BlockParams {
        S6BlockParams {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            w_in: self.w_in,
            gate: self.gate,
            select: self.select_x.clone(),
            a_diag: self.a_diag,
            d_skip: self.d_skip,
            w_out: self.w_out,
            inner_activation: self.inner_activation,
            gated: self.gated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm_core::selective_scan_views;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_x(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_bias_initialised_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init(&mut store, "s6", 4, 8, 3, &mut rng);
        for &b in store.get(p.select.delta_bias).iter() {
            let dt = Unary::Softplus.apply(b);
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt), "dt {dt}");
        }
        assert_eq!(store.get(p.a_diag).row(0).to_vec(), vec![-1.0, -2.0, -3.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init(&mut store, "s6", 4, 8, 3, &mut rng);
        store.get_mut(p.select.delta_bias).fill(0.0);
        let out = p.apply(&store, &Array2::zeros((6, 4))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_equals_explicit_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init(&mut store, "s6", 3, 6, 4, &mut rng);
        let x = rand_x(&mut rng, 4, 3);
        let out = p.apply(&store, &x).unwrap();

        let silu = |v: f64| v / (1.0 + (-v).exp());
        let u = x.dot(store.get(p.w_in)).mapv(silu);
        let b = u.dot(store.get(p.select.w_b));
        let c = u.dot(store.get(p.select.w_c));
        let delta = (u.dot(store.get(p.select.w_delta)) + store.get(p.select.delta_bias)).mapv(|v| (1.0 + v.exp()).ln());
        let d: Vec<f64> = store.get(p.d_skip).iter().copied().collect();
        let y = selective_scan_views(u.view(), delta.view(), b.view(), c.view(), store.get(p.a_diag).view(), &d).unwrap();
        let z = x.dot(store.get(p.gate)).mapv(silu);
        let expect = (&y * &z).dot(store.get(p.w_out));
        let scale = expect.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((&out - &expect).iter().all(|v| v.abs() <= 1e-12 * scale.max(1.0)));
    }

    #[test]
    fn cross_with_zero_ratio_is_s6() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let p = CrossS6BlockParams::init(&mut store, "x6", 3, 6, 4, 0.0, &mut rng).unwrap();
        let x = rand_x(&mut rng, 7, 3);
        let xp = rand_x(&mut rng, 7, 3);
        let cross = p.apply(&store, &x, &xp).unwrap();
        let plain = p.as_s6().apply(&store, &x).unwrap();
        assert_eq!(cross, plain);
    }

    #[test]
    fn cross_with_shared_maps_doubles_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let p = CrossS6BlockParams::init(&mut store, "x6", 3, 6, 4, 1.0, &mut rng).unwrap();
        for (src, dst) in [
            (p.select_x.w_b, p.select_xp.w_b),
            (p.select_x.w_c, p.select_xp.w_c),
            (p.select_x.w_delta, p.select_xp.w_delta),
            (p.select_x.delta_bias, p.select_xp.delta_bias),
        ] {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
        let x = rand_x(&mut rng, 5, 3);
        let cross = p.apply(&store, &x, &x).unwrap();
        let mut doubled = store.clone();
        for id in [p.select_x.w_b, p.select_x.w_c, p.select_x.w_delta, p.select_x.delta_bias] {
            doubled.get_mut(id).mapv_inplace(|v| 2.0 * v);
        }
        let plain = p.as_s6().apply(&doubled, &x).unwrap();
        let scale = plain.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        assert!((&cross - &plain).iter().all(|v| v.abs() <= 1e-12 * scale));
    }

    #[test]
    fn cross_rejects_mismatched_lengths_and_negative_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        assert!(CrossS6BlockParams::init(&mut store, "bad", 3, 6, 4, -0.5, &mut rng).is_err());
        let p = CrossS6BlockParams::init(&mut store, "x6", 3, 6, 4, 0.5, &mut rng).unwrap();
        assert!(p.apply(&store, &rand_x(&mut rng, 5, 3), &rand_x(&mut rng, 4, 3)).is_err());
    }

    #[test]
    fn non_finite_activation_is_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let p = S6BlockParams::init(&mut store, "s6", 3, 6, 4, &mut rng);
        store.get_mut(p.w_out).fill(f64::INFINITY);
        let err = p.apply(&store, &rand_x(&mut rng, 5, 3)).unwrap_err();
        assert!(matches!(err, MnoError::Divergence { .. }));
    }
}
