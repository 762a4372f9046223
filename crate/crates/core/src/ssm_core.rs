//! Diagonal state-space models: discretisation and the selective scan.
//!
//! Shapes follow the selective-SSM convention: a model with `D` channels and
//! `N` state dimensions keeps a hidden state of shape `N × D`; `A` is
//! diagonal per channel and stored as a `D × N` matrix of rates.
//!
//! The scan is provided in two algebraically equivalent forms:
//!
//! * [`selective_scan`] runs the recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t u_t`.
//! * [`attention_form_scan`] evaluates the unrolled sum
//!   `h_T = w_T ⊙ h_0 + Σ_i (w_T / w_i) ⊙ (K_iᵀ V_i)` with cumulative
//!   transition weights `w_i = Π_{j≤i} exp(A Δ_j)`, keys `K_i = B_i` and
//!   values `V_i = u_i Δ_i`, without any recurrence.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{MnoError, Result};

/// Below this `|Δa|` the ZOH input map switches to its series limit `Δ·b`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Sequences longer than this evaluate transition-weight ratios in log space.
pub const LOG_SPACE_MIN_LEN: usize = 64;

/// Smallest transition weight the direct-product form accepts.
pub const MIN_TRANSITION_WEIGHT: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)ΔB`.
    Zoh,
    /// `Ā = I + ΔA`, `B̄ = ΔB`.
    Euler,
    /// `Ā = exp(ΔA)`, `B̄ = ΔB` (ZOH with the O(Δ²) input term dropped).
    SimplifiedZoh,
}

/// Continuous-time diagonal SSM `h' = A h + B u`, `y = C h + D u`, one
/// independent system per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    /// `channels × N` diagonal rates.
    pub a_diag: Array2<f64>,
    /// `channels × N` input maps.
    pub b: Array2<f64>,
    /// `channels × N` output maps.
    pub c: Array2<f64>,
    /// Per-channel skip term.
    pub d: Array1<f64>,
}

impl ContinuousSsm {
    /// Rates must be finite and non-positive; zero rates are accepted so the
    /// marginal `a → 0` limit can be studied.
    pub fn new(a_diag: Array2<f64>, b: Array2<f64>, c: Array2<f64>, d: Array1<f64>) -> Result<Self> {
        let (ch, n) = a_diag.dim();
        if n == 0 || ch == 0 {
            return Err(MnoError::invalid("state dimension and channel count must be positive"));
        }
        if b.dim() != (ch, n) || c.dim() != (ch, n) || d.len() != ch {
            return Err(MnoError::invalid(format!(
                "shape mismatch: a {:?}, b {:?}, c {:?}, d {}",
                a_diag.dim(),
                b.dim(),
                c.dim(),
                d.len()
            )));
        }
        let all = a_diag.iter().chain(b.iter()).chain(c.iter()).chain(d.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(MnoError::invalid("non-finite SSM parameter"));
        }
        if a_diag.iter().any(|&a| a > 0.0) {
            return Err(MnoError::invalid("diagonal rates must be non-positive"));
        }
        Ok(ContinuousSsm { a_diag, b, c, d })
    }

    /// Single-channel system from per-state vectors.
    pub fn single(a_diag: &[f64], b: &[f64], c: &[f64], d: f64) -> Result<Self> {
        let n = a_diag.len();
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec());
        Self::new(
            row(a_diag).map_err(|e| MnoError::invalid(e.to_string()))?,
            row(b).map_err(|e| MnoError::invalid(e.to_string()))?,
            row(c).map_err(|e| MnoError::invalid(e.to_string()))?,
            Array1::from_elem(1, d),
        )
        .and_then(|s| if s.n_state() == n { Ok(s) } else { Err(MnoError::invalid("length mismatch")) })
    }

    pub fn n_state(&self) -> usize {
        self.a_diag.ncols()
    }

    pub fn channels(&self) -> usize {
        self.a_diag.nrows()
    }
}

/// Discrete transition `Ā` and input map `B̄`, both `channels × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Array2<f64>,
    pub b_bar: Array2<f64>,
    pub scheme: Discretization,
}

fn check_delta(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(MnoError::invalid(format!("step size must be positive and finite, got {delta}")));
    }
    Ok(())
}

/// Discretise a single `(a, b)` pair with step `delta`.
#[inline]
pub fn discretize_scalar<T: Real>(a: T, b: T, delta: T, scheme: Discretization) -> (T, T) {
    let x = delta * a;
    match scheme {
        Discretization::Zoh => {
            let a_bar = x.exp();
            let b_bar = if x.abs() < T::of(ZOH_SERIES_THRESHOLD) {
                delta * b
            } else {
                x.exp_m1() / x * delta * b
            };
            (a_bar, b_bar)
        }
        Discretization::Euler => (T::one() + x, delta * b),
        Discretization::SimplifiedZoh => (x.exp(), delta * b),
    }
}

pub fn discretize(ssm: &ContinuousSsm, delta: f64, scheme: Discretization) -> Result<DiscreteSsm> {
    check_delta(delta)?;
    let mut a_bar = Array2::zeros(ssm.a_diag.dim());
    let mut b_bar = Array2::zeros(ssm.a_diag.dim());
    for ((idx, &a), &b) in ssm.a_diag.indexed_iter().zip(ssm.b.iter()) {
        let (ab, bb) = discretize_scalar(a, b, delta, scheme);
        a_bar[idx] = ab;
        b_bar[idx] = bb;
    }
    Ok(DiscreteSsm { a_bar, b_bar, scheme })
}

pub fn discretize_zoh(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    discretize(ssm, delta, Discretization::Zoh)
}

pub fn discretize_euler(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    discretize(ssm, delta, Discretization::Euler)
}

pub fn discretize_simplified_zoh(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    discretize(ssm, delta, Discretization::SimplifiedZoh)
}

/// Inputs to a selective scan over `T` tokens with `D` channels and `N`
/// state dimensions.
#[derive(Clone, Debug)]
pub struct SelectiveScanInputs {
    /// `T × D` input tokens.
    pub u: Array2<f64>,
    /// `T × D` strictly positive step sizes.
    pub delta: Array2<f64>,
    /// `T × N` input-dependent input maps.
    pub b_t: Array2<f64>,
    /// `T × N` input-dependent output maps.
    pub c_t: Array2<f64>,
    /// `N × D` initial state.
    pub h0: Array2<f64>,
}

impl SelectiveScanInputs {
    /// Inputs with a zero initial state.
    pub fn new(u: Array2<f64>, delta: Array2<f64>, b_t: Array2<f64>, c_t: Array2<f64>) -> Result<Self> {
        let h0 = Array2::zeros((b_t.ncols(), u.ncols()));
        Self::with_state(u, delta, b_t, c_t, h0)
    }

    pub fn with_state(
        u: Array2<f64>,
        delta: Array2<f64>,
        b_t: Array2<f64>,
        c_t: Array2<f64>,
        h0: Array2<f64>,
    ) -> Result<Self> {
        let s = SelectiveScanInputs { u, delta, b_t, c_t, h0 };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_state(&self) -> usize {
        self.b_t.ncols()
    }

    fn validate(&self) -> Result<()> {
        let t = self.u.nrows();
        let d = self.u.ncols();
        let n = self.b_t.ncols();
        if self.delta.dim() != (t, d) {
            return Err(MnoError::invalid(format!("delta shape {:?} != u shape {:?}", self.delta.dim(), (t, d))));
        }
        if self.b_t.nrows() != t || self.c_t.nrows() != t {
            return Err(MnoError::invalid(format!(
                "sequence length mismatch: u {t}, B {}, C {}",
                self.b_t.nrows(),
                self.c_t.nrows()
            )));
        }
        if self.c_t.ncols() != n {
            return Err(MnoError::invalid("B and C state widths differ"));
        }
        if self.h0.dim() != (n, d) {
            return Err(MnoError::invalid(format!("h0 shape {:?} != {:?}", self.h0.dim(), (n, d))));
        }
        if self.delta.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(MnoError::invalid("step sizes must be positive and finite"));
        }
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&self.u) && finite(&self.b_t) && finite(&self.c_t) && finite(&self.h0)) {
            return Err(MnoError::invalid("non-finite scan input"));
        }
        Ok(())
    }

    fn check_against(&self, ssm: &ContinuousSsm) -> Result<()> {
        if ssm.channels() != self.channels() || ssm.n_state() != self.n_state() {
            return Err(MnoError::invalid(format!(
                "SSM is {}x{} (channels x state) but inputs are {}x{}",
                ssm.channels(),
                ssm.n_state(),
                self.channels(),
                self.n_state()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScanOutput {
    /// `T × D` outputs.
    pub y: Array2<f64>,
    /// `N × D` state after the last token.
    pub h_final: Array2<f64>,
}

/// Per-step quantities kept for the adjoint pass, each laid out
/// `[t][k][e]` (state index outer, channel inner).
pub struct ScanTrace<T> {
    pub decay: Vec<T>,
    pub states: Vec<T>,
}

/// Raw selective-scan kernel on row-major buffers.
///
/// `u`, `delta`: `len × ch`; `b`, `c`: `len × n`; `a`: `ch × n`; `d`: `ch`;
/// `h0`: `ch × n` (channel-major). Returns `(y, h_final, trace)` with
/// `h_final` channel-major. The state is held state-major internally so the
/// innermost loop runs over channels.
#[allow(clippy::too_many_arguments)]
pub fn scan_kernel<T: Real>(
    u: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    d: &[T],
    h0: Option<&[T]>,
    len: usize,
    ch: usize,
    n: usize,
    scheme: Discretization,
    keep_trace: bool,
) -> (Vec<T>, Vec<T>, Option<ScanTrace<T>>) {
    let at = transpose(a, ch, n);
    let mut h = match h0 {
        Some(h0) => transpose(h0, ch, n),
        None => vec![T::zero(); ch * n],
    };
    let mut y = vec![T::zero(); len * ch];
    let mut trace = keep_trace.then(|| ScanTrace {
        decay: vec![T::zero(); len * ch * n],
        states: vec![T::zero(); len * ch * n],
    });
    let mut du = vec![T::zero(); ch];
    let mut ab = vec![T::zero(); ch];
    for t in 0..len {
        let dl = &delta[t * ch..(t + 1) * ch];
        let ul = &u[t * ch..(t + 1) * ch];
        for ((o, &dt), &ue) in du.iter_mut().zip(dl).zip(ul) {
            *o = dt * ue;
        }
        let yl = &mut y[t * ch..(t + 1) * ch];
        for k in 0..n {
            let (bk, ck) = (b[t * n + k], c[t * n + k]);
            let ak = &at[k * ch..(k + 1) * ch];
            let hk = &mut h[k * ch..(k + 1) * ch];
            match scheme {
                Discretization::SimplifiedZoh => {
                    for ((o, &a_e), &dt) in ab.iter_mut().zip(ak).zip(dl) {
                        *o = (dt * a_e).fast_exp();
                    }
                    for (((hv, yv), &ab_e), &du_e) in hk.iter_mut().zip(yl.iter_mut()).zip(&ab).zip(&du) {
                        let next = ab_e * *hv + du_e * bk;
                        *hv = next;
                        *yv += ck * next;
                    }
                }
                _ => {
                    for e in 0..ch {
                        let (a_bar, b_bar) = discretize_scalar(ak[e], bk, dl[e], scheme);
                        ab[e] = a_bar;
                        let next = a_bar * hk[e] + b_bar * ul[e];
                        hk[e] = next;
                        yl[e] += ck * next;
                    }
                }
            }
            if let Some(tr) = trace.as_mut() {
                let base = (t * n + k) * ch;
                tr.states[base..base + ch].copy_from_slice(hk);
                tr.decay[base..base + ch].copy_from_slice(&ab);
            }
        }
        for ((yv, &de), &ue) in yl.iter_mut().zip(d).zip(ul) {
            *yv += de * ue;
        }
    }
    (y, transpose(&h, n, ch), trace)
}

/// Transpose a row-major `rows × cols` buffer.
pub(crate) fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(x[i * cols + j]);
        }
    }
    out
}

fn standard(a: &Array2<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

/// Run `h_t = Ā_t ⊙ h_{t-1} + B̄_t u_t`, `y_t = C_t · h_t + d ⊙ u_t`, where
/// `(Ā_t, B̄_t)` discretise `(A, B_t)` with the per-token step `Δ_t` under
/// `scheme`. The SSM's own `b`/`c` are replaced by the selective `B_t`/`C_t`.
pub fn selective_scan(inputs: &SelectiveScanInputs, ssm: &ContinuousSsm, scheme: Discretization) -> Result<ScanOutput> {
    inputs.validate()?;
    inputs.check_against(ssm)?;
    let (len, ch, n) = (inputs.len(), inputs.channels(), inputs.n_state());
    let h0 = standard(&inputs.h0.t().to_owned());
    let (y, h, _) = scan_kernel(
        &standard(&inputs.u),
        &standard(&inputs.delta),
        &standard(&inputs.b_t),
        &standard(&inputs.c_t),
        &standard(&ssm.a_diag),
        &ssm.d.to_vec(),
        Some(&h0),
        len,
        ch,
        n,
        scheme,
        false,
    );
    let y = Array2::from_shape_vec((len, ch), y).expect("scan output shape");
    let h_final = Array2::from_shape_vec((ch, n), h).expect("state shape").reversed_axes();
    Ok(ScanOutput { y, h_final: h_final.as_standard_layout().into_owned() })
}

/// Final state of the scan computed from the unrolled weighted sum rather
/// than the recurrence. Equals `selective_scan(.., SimplifiedZoh).h_final`.
///
/// Sequences up to [`LOG_SPACE_MIN_LEN`] tokens form `w_i` as a direct
/// running product and fail if any weight underflows
/// [`MIN_TRANSITION_WEIGHT`]; longer sequences form the ratio `w_T / w_i`
/// from cumulative log weights.
pub fn attention_form_scan(inputs: &SelectiveScanInputs, ssm: &ContinuousSsm) -> Result<Array2<f64>> {
    inputs.validate()?;
    inputs.check_against(ssm)?;
    let (len, ch, n) = (inputs.len(), inputs.channels(), inputs.n_state());
    let mut h = Array2::<f64>::zeros((n, ch));
    if len <= LOG_SPACE_MIN_LEN {
        // w[i][k, e] = Π_{j ≤ i} exp(a[e, k] Δ_j[e])
        let mut w = vec![Array2::<f64>::ones((n, ch)); len + 1];
        for i in 0..len {
            let mut next = w[i].clone();
            for e in 0..ch {
                for k in 0..n {
                    next[[k, e]] *= (ssm.a_diag[[e, k]] * inputs.delta[[i, e]]).exp();
                    if next[[k, e]] < MIN_TRANSITION_WEIGHT {
                        return Err(MnoError::Instability(format!(
                            "transition weight underflow at token {i} (channel {e}, state {k}); \
                             use a shorter sequence or rates closer to zero"
                        )));
                    }
                }
            }
            w[i + 1] = next;
        }
        let w_t = &w[len];
        for k in 0..n {
            for e in 0..ch {
                let mut acc = w_t[[k, e]] * inputs.h0[[k, e]];
                for i in 0..len {
                    let ratio = w_t[[k, e]] / w[i + 1][[k, e]];
                    let kv = inputs.b_t[[i, k]] * inputs.u[[i, e]] * inputs.delta[[i, e]];
                    acc += ratio * kv;
                }
                h[[k, e]] = acc;
            }
        }
    } else {
        // Cumulative Δ per channel; log w_i = a · S_i.
        let mut cum = Array2::<f64>::zeros((len + 1, ch));
        for i in 0..len {
            for e in 0..ch {
                cum[[i + 1, e]] = cum[[i, e]] + inputs.delta[[i, e]];
            }
        }
        for k in 0..n {
            for e in 0..ch {
                let a = ssm.a_diag[[e, k]];
                let total = cum[[len, e]];
                let mut acc = (a * total).exp() * inputs.h0[[k, e]];
                for i in 0..len {
                    let ratio = (a * (total - cum[[i + 1, e]])).exp();
                    acc += ratio * inputs.b_t[[i, k]] * inputs.u[[i, e]] * inputs.delta[[i, e]];
                }
                h[[k, e]] = acc;
            }
        }
    }
    Ok(h)
}

/// Largest violation of additivity and homogeneity of the transition map
/// `x ↦ exp(a Δ) ⊙ x`.
pub fn linearity_check(delta: f64, a_diag: &[f64], x1: &[f64], x2: &[f64], alpha: f64) -> f64 {
    let apply = |x: &[f64]| -> Vec<f64> { a_diag.iter().zip(x).map(|(a, v)| (a * delta).exp() * v).collect() };
    let sum: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a + b).collect();
    let scaled: Vec<f64> = x1.iter().map(|v| alpha * v).collect();
    let (t1, t2, ts, ta) = (apply(x1), apply(x2), apply(&sum), apply(&scaled));
    let additive = (0..a_diag.len()).map(|i| (ts[i] - t1[i] - t2[i]).abs()).fold(0.0, f64::max);
    let homogeneous = (0..a_diag.len()).map(|i| (ta[i] - alpha * t1[i]).abs()).fold(0.0, f64::max);
    additive.max(homogeneous)
}

/// Impulse response `k_j = Σ_n c_n ā_n^j b̄_n` of a time-invariant scan for
/// one channel, `j = 0..len`.
pub fn lti_kernel(a_bar: &[f64], b_bar: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    (0..len)
        .map(|j| (0..a_bar.len()).map(|k| c[k] * a_bar[k].powi(j as i32) * b_bar[k]).sum())
        .collect()
}

/// Scan with a view-based API for callers that already hold channel-major
/// data; used by the block decomposition tests.
pub fn selective_scan_views(
    u: ArrayView2<f64>,
    delta: ArrayView2<f64>,
    b_t: ArrayView2<f64>,
    c_t: ArrayView2<f64>,
    a_diag: ArrayView2<f64>,
    d: &[f64],
) -> Result<Array2<f64>> {
    let ssm = ContinuousSsm::new(
        a_diag.to_owned(),
        Array2::zeros(a_diag.dim()),
        Array2::zeros(a_diag.dim()),
        Array1::from_vec(d.to_vec()),
    )?;
    let inputs = SelectiveScanInputs::new(u.to_owned(), delta.to_owned(), b_t.to_owned(), c_t.to_owned())?;
    Ok(selective_scan(&inputs, &ssm, Discretization::SimplifiedZoh)?.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(a: f64, b: f64) -> ContinuousSsm {
        ContinuousSsm::single(&[a], &[b], &[1.0], 0.0).unwrap()
    }

    // Expected values computed with mpmath at 50 digits:
    // exp(-0.1) = 0.904837418035959573164249059446...
    // 1 - exp(-0.1) = 0.095162581964040426835750940554...
    #[test]
    fn zoh_reference_values() {
        let d = discretize_zoh(&one(-1.0, 1.0), 0.1).unwrap();
        assert!((d.a_bar[[0, 0]] - 0.904_837_418_035_959_6).abs() < 1e-15);
        assert!((d.b_bar[[0, 0]] - 0.095_162_581_964_040_43).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_step_limit() {
        let d = discretize_zoh(&one(-1.0, 1.0), 1e-12).unwrap();
        assert!((d.a_bar[[0, 0]] - 1.0).abs() < 1e-11);
        assert!((d.b_bar[[0, 0]] - 1e-12).abs() < 1e-22);
    }

    #[test]
    fn zoh_zero_rate_limit_branch() {
        let d = discretize_zoh(&one(0.0, 2.0), 0.5).unwrap();
        assert_eq!(d.a_bar[[0, 0]], 1.0);
        assert_eq!(d.b_bar[[0, 0]], 1.0);
    }

    #[test]
    fn euler_values() {
        let d = discretize_euler(&one(-1.0, 1.0), 0.1).unwrap();
        assert!((d.a_bar[[0, 0]] - 0.9).abs() < 1e-15);
        assert!((d.b_bar[[0, 0]] - 0.1).abs() < 1e-15);
        let d = discretize_euler(&one(-2.0, 1.0), 0.6).unwrap();
        assert!((d.a_bar[[0, 0]] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zoh_euler_gap_within_taylor_remainder() {
        let z = discretize_zoh(&one(-1.0, 1.0), 0.1).unwrap();
        let e = discretize_euler(&one(-1.0, 1.0), 0.1).unwrap();
        let gap = (z.a_bar[[0, 0]] - e.a_bar[[0, 0]]).abs();
        // 0.0048374180359596 and 0.01/2 * e^0.1 = 0.0055258545903782 (mpmath)
        assert!((gap - 0.004_837_418_035_959_6).abs() < 1e-15);
        assert!(gap <= 0.005_525_854_590_378_2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(discretize_zoh(&one(-1.0, 1.0), 0.0).is_err());
        assert!(discretize_zoh(&one(-1.0, 1.0), -0.1).is_err());
        assert!(discretize_euler(&one(-1.0, 1.0), f64::NAN).is_err());
        assert!(ContinuousSsm::single(&[f64::INFINITY], &[1.0], &[1.0], 0.0).is_err());
        assert!(ContinuousSsm::single(&[0.5], &[1.0], &[1.0], 0.0).is_err());
        let u = Array2::zeros((3, 2));
        let bad = SelectiveScanInputs::new(u.clone(), Array2::ones((3, 2)), Array2::zeros((2, 4)), Array2::zeros((3, 4)));
        assert!(bad.is_err());
        let bad = SelectiveScanInputs::new(u, Array2::zeros((3, 2)), Array2::zeros((3, 4)), Array2::zeros((3, 4)));
        assert!(bad.is_err());
    }

    #[test]
    fn single_step_unrolling() {
        let ssm = ContinuousSsm::new(
            array![[-1.0, -2.0]],
            Array2::zeros((1, 2)),
            Array2::zeros((1, 2)),
            array![0.5],
        )
        .unwrap();
        let inputs = SelectiveScanInputs::new(array![[2.0]], array![[0.1]], array![[1.0, 3.0]], array![[0.5, -1.0]]).unwrap();
        let out = selective_scan(&inputs, &ssm, Discretization::Zoh).unwrap();
        let bb0 = (-0.1f64).exp_m1() / -0.1 * 0.1 * 1.0;
        let bb1 = (-0.2f64).exp_m1() / -0.2 * 0.1 * 3.0;
        let expect = 0.5 * bb0 * 2.0 - 1.0 * bb1 * 2.0 + 0.5 * 2.0;
        assert!((out.y[[0, 0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn two_step_attention_form_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |s: (usize, usize)| Array2::from_shape_fn(s, |_| rng.random_range(-1.0..1.0));
        let (n, ch) = (3, 2);
        let a = -r((ch, n)).mapv(f64::abs) - 0.1;
        let ssm = ContinuousSsm::new(a.clone(), Array2::zeros((ch, n)), Array2::zeros((ch, n)), Array1::zeros(ch)).unwrap();
        let u = r((2, ch));
        let delta = r((2, ch)).mapv(|v| v.abs() * 0.2 + 0.01);
        let b = r((2, n));
        let c = r((2, n));
        let h0 = r((n, ch));
        let inputs = SelectiveScanInputs::with_state(u.clone(), delta.clone(), b.clone(), c, h0.clone()).unwrap();
        let h = attention_form_scan(&inputs, &ssm).unwrap();
        for k in 0..n {
            for e in 0..ch {
                let w1 = (a[[e, k]] * delta[[0, e]]).exp();
                let w2 = w1 * (a[[e, k]] * delta[[1, e]]).exp();
                let kv1 = b[[0, k]] * u[[0, e]] * delta[[0, e]];
                let kv2 = b[[1, k]] * u[[1, e]] * delta[[1, e]];
                let expect = w2 * h0[[k, e]] + (w2 / w1) * kv1 + kv2;
                assert!((h[[k, e]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_rates_collapse_weights() {
        let (n, ch, len) = (2, 2, 5);
        let ssm = ContinuousSsm::new(Array2::zeros((ch, n)), Array2::zeros((ch, n)), Array2::zeros((ch, n)), Array1::zeros(ch)).unwrap();
        let u = Array2::from_shape_fn((len, ch), |(t, e)| (t + e) as f64 * 0.3 - 0.5);
        let delta = Array2::from_elem((len, ch), 0.2);
        let b = Array2::from_shape_fn((len, n), |(t, k)| (t * k) as f64 * 0.1 + 1.0);
        let h0 = Array2::from_elem((n, ch), 0.7);
        let inputs = SelectiveScanInputs::with_state(u.clone(), delta.clone(), b.clone(), b.clone(), h0.clone()).unwrap();
        let h = attention_form_scan(&inputs, &ssm).unwrap();
        for k in 0..n {
            for e in 0..ch {
                let expect: f64 = h0[[k, e]] + (0..len).map(|i| b[[i, k]] * u[[i, e]] * delta[[i, e]]).sum::<f64>();
                assert!((h[[k, e]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_form_underflow_is_reported() {
        let ssm = ContinuousSsm::single(&[-1000.0], &[0.0], &[0.0], 0.0).unwrap();
        let len = 60;
        let inputs = SelectiveScanInputs::new(
            Array2::ones((len, 1)),
            Array2::from_elem((len, 1), 1.0),
            Array2::ones((len, 1)),
            Array2::ones((len, 1)),
        )
        .unwrap();
        assert!(matches!(attention_form_scan(&inputs, &ssm), Err(MnoError::Instability(_))));
    }

    #[test]
    fn linearity_exact_cases() {
        let a = [-1.0, -0.5, -3.0];
        let x1 = [0.3, -1.2, 2.0];
        assert_eq!(linearity_check(0.1, &a, &x1, &[0.0; 3], 1.0), 0.0);
        let zero = linearity_check(0.1, &a, &x1, &x1, 0.0);
        assert!(zero < 1e-15);
    }
}
