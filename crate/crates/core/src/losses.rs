//! Training objectives: the supervised PSNR loss and the unpaired losses
//! (gradient penalty, critic, adversarial, cycle, identity, conditional and
//! their weighted total).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduce, Var};
use crate::models::Critic;
use crate::params::Bound;
use crate::tensor::{Scalar, Tensor};

pub const MSE_FLOOR: f64 = 1e-10;
const UNBOUNDED: f64 = 1e30;

/// Form of the critic objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `(d_real - d_fake) * lambda * w`, literally.
    Paper,
    /// `d_fake - d_real + w * lambda^2`.
    #[default]
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cy: f64,
    pub w_i: f64,
    pub w_a: f64,
    pub w_co: f64,
    pub gp_weight: f64,
    pub penalty_form: PenaltyForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cy: 10.0, w_i: 5.0, w_a: 1.0, w_co: 1.0, gp_weight: 10.0, penalty_form: PenaltyForm::Standard }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_cy", self.w_cy),
            ("w_i", self.w_i),
            ("w_a", self.w_a),
            ("w_co", self.w_co),
            ("gp_weight", self.gp_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch { op, lhs: g.shape(a).to_vec(), rhs: g.shape(b).to_vec() });
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "mse", a, b)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean_all(sq)
}

/// `-log10(max(mse, 1e-10))`, i.e. PSNR / 10 for images in `[0, 1]`.
pub fn psnr_loss<T: Scalar>(g: &mut Graph<T>, output: Var, target: Var) -> Result<Var> {
    let m = mse(g, output, target)?;
    let m = g.clamp(m, MSE_FLOOR, UNBOUNDED)?;
    let l = g.log10(m)?;
    g.neg(l)
}

/// `max(0, norm - 1)`.
pub fn penalty_hinge(grad_norm: f64) -> f64 {
    (grad_norm - 1.0).max(0.0)
}

/// Per-sample gradient penalty at `u * x_t + (1 - u) * x_fake`.
pub struct Penalty {
    /// `lambda` per sample, differentiable with respect to the critic parameters.
    pub lambda: Var,
    /// `||grad D||` per sample.
    pub grad_norm: Vec<f64>,
}

/// Interpolates `u_i * a_i + (1 - u_i) * b_i` per sample.
pub fn interpolate<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, u: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "interpolate", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let n = a.shape()[0];
    if u.len() != n || u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("one interpolation coefficient in [0, 1] per sample".into()));
    }
    let inner = a.len() / n;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            let t = T::of(u[i / inner]);
            t * x + (T::one() - t) * y
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradient penalty of `critic` (parameters `p`, recorded on `g`).
///
/// The input gradient `grad D(y)` is computed by an ordinary backward pass on
/// a scratch graph. Its norm equals the directional derivative of `D` along
/// `v = grad D / ||grad D||`, which is recorded on `g` as a forward-mode
/// tangent of the critic. Because `v` has unit length, holding it fixed does
/// not change the derivative of that norm, so backpropagating through the
/// tangent gives the exact second-order parameter gradient.
pub fn gradient_penalty<T: Scalar>(
    g: &mut Graph<T>,
    critic: &Critic,
    p: &Bound,
    x_t: &Tensor<T>,
    x_fake: &Tensor<T>,
    u: &[f64],
) -> Result<Penalty> {
    let y = interpolate(x_t, x_fake, u)?;
    let values: Vec<Tensor<T>> = p.vars().iter().map(|&v| g.value(v).clone()).collect();
    let grad = critic.input_gradient_from(&values, &y)?;
    let n = y.shape()[0];
    let inner = y.len() / n;
    let mut dir = grad.clone();
    let mut norms = Vec::with_capacity(n);
    for chunk in dir.data_mut().chunks_exact_mut(inner) {
        let norm = chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("critic input gradient".into()));
        }
        let inv = if norm > 0.0 { T::of(1.0 / norm) } else { T::zero() };
        chunk.iter_mut().for_each(|v| *v = *v * inv);
        norms.push(norm);
    }
    let yv = g.constant(y)?;
    let dv = g.constant(dir)?;
    let (_, slope) = critic.forward_tangent(g, p, yv, dv)?;
    let excess = g.add_scalar(slope, -1.0)?;
    let lambda = g.clamp(excess, 0.0, UNBOUNDED)?;
    Ok(Penalty { lambda, grad_norm: norms })
}

/// Critic objective from per-sample scores `(N)` and penalties `(N)`.
pub fn critic_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_real: Var,
    d_fake: Var,
    lambda: Var,
    weights: &LossWeights,
) -> Result<Var> {
    same_shape(g, "critic_loss", d_real, d_fake)?;
    same_shape(g, "critic_loss", d_real, lambda)?;
    match weights.penalty_form {
        PenaltyForm::Paper => {
            let diff = g.sub(d_real, d_fake)?;
            let prod = g.mul(diff, lambda)?;
            let m = g.mean_all(prod)?;
            g.mul_scalar(m, weights.gp_weight)
        }
        PenaltyForm::Standard => {
            let mf = g.mean_all(d_fake)?;
            let mr = g.mean_all(d_real)?;
            let wdist = g.sub(mf, mr)?;
            let sq = g.square(lambda)?;
            let pen = g.mean_all(sq)?;
            let pen = g.mul_scalar(pen, weights.gp_weight)?;
            g.add(wdist, pen)
        }
    }
}

/// Generator-side adversarial term `-mean(d_fake)`.
pub fn adversarial_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    let m = g.mean_all(d_fake)?;
    g.neg(m)
}

/// The critic score of the fakes, `mean(d_fake)`, for reporting.
pub fn adversarial_report(d_fake: &[f64]) -> f64 {
    d_fake.iter().sum::<f64>() / d_fake.len().max(1) as f64
}

/// `mse(x_s, x_s_cyc) + mse(x_t, x_t_cyc)`.
pub fn cycle_loss<T: Scalar>(g: &mut Graph<T>, x_s: Var, x_s_cyc: Var, x_t: Var, x_t_cyc: Var) -> Result<Var> {
    let a = mse(g, x_s, x_s_cyc)?;
    let b = mse(g, x_t, x_t_cyc)?;
    g.add(a, b)
}

/// Subtracts each sample's mean over channels and pixels.
pub fn center<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    if rank < 2 {
        return Err(Error::InvalidShape {
            op: "center",
            shape: g.shape(x).to_vec(),
            reason: "expected a batch of images".into(),
        });
    }
    let axes: Vec<usize> = (1..rank).collect();
    let mean = g.reduce(Reduce::Mean, x, &axes)?;
    let neg = g.neg(mean)?;
    g.add_bcast(x, neg)
}

/// Brightness-invariant identity loss: each image is centred by its own mean.
pub fn identity_loss<T: Scalar>(g: &mut Graph<T>, x_s: Var, x_t_fake: Var, x_t: Var, x_s_fake: Var) -> Result<Var> {
    same_shape(g, "identity_loss", x_s, x_t_fake)?;
    same_shape(g, "identity_loss", x_t, x_s_fake)?;
    let (a, b) = (center(g, x_s)?, center(g, x_t_fake)?);
    let first = mse(g, a, b)?;
    let (c, d) = (center(g, x_t)?, center(g, x_s_fake)?);
    let second = mse(g, c, d)?;
    g.add(first, second)
}

/// Binary cross-entropy between `z (N, K)` and classifier outputs `(N, K)`,
/// summed over components and averaged over the batch.
pub fn conditional_loss<T: Scalar>(g: &mut Graph<T>, z: Var, c_out: Var) -> Result<Var> {
    same_shape(g, "conditional_loss", z, c_out)?;
    if g.value(z).data().iter().any(|v| !(T::zero()..=T::one()).contains(v)) {
        return Err(Error::InvalidArgument("style vector entries must lie in [0, 1]".into()));
    }
    let c = g.clamp(c_out, crate::models::PROB_CLAMP, 1.0 - crate::models::PROB_CLAMP)?;
    let log_c = g.ln(c)?;
    let one_minus_c = g.mul_scalar(c, -1.0)?;
    let one_minus_c = g.add_scalar(one_minus_c, 1.0)?;
    let log_1c = g.ln(one_minus_c)?;
    let one_minus_z = g.mul_scalar(z, -1.0)?;
    let one_minus_z = g.add_scalar(one_minus_z, 1.0)?;
    let a = g.mul(z, log_c)?;
    let b = g.mul(one_minus_z, log_1c)?;
    let s = g.add(a, b)?;
    let n = g.shape(z)[0] as f64;
    let total = g.sum_all(s)?;
    g.mul_scalar(total, -1.0 / n)
}

/// Component losses of one generator update.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLosses {
    pub cycle: Var,
    pub identity: Var,
    /// Generator-side adversarial term from [`adversarial_loss`].
    pub adversarial: Var,
    /// Absent when the conditional weight is zero.
    pub conditional: Option<Var>,
}

/// `w_cy * L_cy + w_i * L_i + w_a * L_a + w_co * L_co`.
pub fn total_generator_loss<T: Scalar>(g: &mut Graph<T>, c: &GeneratorLosses, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut terms = vec![(c.cycle, weights.w_cy), (c.identity, weights.w_i), (c.adversarial, weights.w_a)];
    match (c.conditional, weights.w_co > 0.0) {
        (Some(co), true) => terms.push((co, weights.w_co)),
        (None, true) => return Err(Error::InvalidArgument("conditional weight set but no conditional loss".into())),
        _ => {}
    }
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let val = g.value(v).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite("generator loss component".into()));
        }
        let t = g.mul_scalar(v, w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(total.expect("at least three terms"))
}
