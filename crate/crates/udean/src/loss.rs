//! Differentiable training losses: L1, squared-SSIM penalty, and the
//! least-squares adversarial terms, plus their weighted combinations for
//! the cycle / consistency / adaptation objectives and the two
//! discriminator objectives.
//!
//! Every 1/N mean is taken over all elements of the batched array, so a
//! loss value does not depend on patch resolution.

use ndarray::Array5;

use crate::conv::ConvSpec;
use crate::ssim::{gaussian_window, SsimConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{scalar_value, Scalar};
use crate::{Error, Result};

/// Weights of the generator objective; the defaults are the operating
/// point used throughout training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// SSIM-term weight inside the cycle / consistency losses.
    pub alpha: f64,
    /// Adversarial-term weight inside the cycle / consistency losses.
    pub beta: f64,
    /// Image cycle.
    pub lambda1: f64,
    /// Feature cycle.
    pub lambda2: f64,
    /// HR consistency.
    pub lambda3: f64,
    /// LR consistency.
    pub lambda4: f64,
    /// Image-space adaptation.
    pub lambda5: f64,
    /// Feature-space adaptation.
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.01,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 0.1,
            lambda6: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-component loss breakdown of one generator step, plus the
/// discriminator losses when they were computed this iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub i_cyc: f64,
    pub f_cyc: f64,
    pub hr_con: f64,
    pub lr_con: f64,
    pub da: f64,
    pub fa: f64,
    pub total: f64,
    pub lrd: Option<f64>,
    pub fd: Option<f64>,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("i_cyc", self.i_cyc),
            ("f_cyc", self.f_cyc),
            ("hr_con", self.hr_con),
            ("lr_con", self.lr_con),
            ("da", self.da),
            ("fa", self.fa),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

fn check_same_shape<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, what: &str) -> Result<()> {
    if tape.dim(x) != tape.dim(y) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            tape.dim(x),
            tape.dim(y)
        )));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    check_same_shape(tape, x, y, "l1 operands")?;
    let d = tape.sub(x, y);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Mean windowed SSIM per batch item: (B, 1, 1, 1, 1).
pub fn ssim_per_item<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    cfg: &SsimConfig,
) -> Result<Var> {
    check_same_shape(tape, x, y, "ssim operands")?;
    let (_, c, nx, ny, _) = tape.dim(x);
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("ssim expects single-channel images, got {c}")));
    }
    let w = cfg.window;
    if nx < w || ny < w {
        return Err(Error::ShapeMismatch(format!(
            "patch {nx}x{ny} smaller than the {w}x{w} window"
        )));
    }
    let win = gaussian_window(w, cfg.sigma);
    let mut kernel = Array5::zeros((1, 1, w, w, 1));
    for ((i, j), &v) in win.indexed_iter() {
        kernel[[0, 0, i, j, 0]] = T::from_f64(v);
    }
    let k = tape.constant(kernel);
    let spec = ConvSpec::new((w, w, 1), (1, 1, 1), (0, 0, 0));

    let mu_x = tape.conv3d(x, k, None, spec);
    let mu_y = tape.conv3d(y, k, None, spec);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let exx = tape.conv3d(xx, k, None, spec);
    let eyy = tape.conv3d(yy, k, None, spec);
    let exy = tape.conv3d(xy, k, None, spec);

    let mu_x2 = tape.mul(mu_x, mu_x);
    let mu_y2 = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let var_x = tape.sub(exx, mu_x2);
    let var_y = tape.sub(eyy, mu_y2);
    let cov = tape.sub(exy, mu_xy);

    let (c1, c2) = (cfg.c1(), cfg.c2());
    let lum_num = {
        let t = tape.mul_scalar(mu_xy, 2.0);
        tape.add_scalar(t, c1)
    };
    let con_num = {
        let t = tape.mul_scalar(cov, 2.0);
        tape.add_scalar(t, c2)
    };
    let lum_den = {
        let t = tape.add(mu_x2, mu_y2);
        tape.add_scalar(t, c1)
    };
    let con_den = {
        let t = tape.add(var_x, var_y);
        tape.add_scalar(t, c2)
    };
    let num = tape.mul(lum_num, con_num);
    let den = tape.mul(lum_den, con_den);
    let map = tape.div(num, den);
    Ok(tape.mean_per_item(map))
}

/// |1 - s^2| averaged over the batch, where `per_item` holds the mean
/// SSIM of each batch item.
pub fn ssim_penalty<T: Scalar>(tape: &mut Tape<T>, per_item: Var) -> Var {
    let sq = tape.square(per_item);
    let neg = tape.mul_scalar(sq, -1.0);
    let shifted = tape.add_scalar(neg, 1.0);
    let a = tape.abs(shifted);
    tape.mean_all(a)
}

/// The squared-SSIM penalty between two image batches.
pub fn ssim_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let per_item = ssim_per_item(tape, x, y, cfg)?;
    Ok(ssim_penalty(tape, per_item))
}

/// Least-squares generator adversarial term: mean (D(x) - 1)^2.
pub fn adv_gen<T: Scalar>(tape: &mut Tape<T>, d_out: Var) -> Var {
    let shifted = tape.add_scalar(d_out, -1.0);
    let sq = tape.square(shifted);
    tape.mean_all(sq)
}

/// Equilibrium adaptation term: mean|D(a) - 0.5| + mean|D(b) - 0.5|.
pub fn da_pair<T: Scalar>(tape: &mut Tape<T>, d_a: Var, d_b: Var) -> Var {
    let mut terms = Vec::with_capacity(2);
    for d in [d_a, d_b] {
        let shifted = tape.add_scalar(d, -0.5);
        let a = tape.abs(shifted);
        terms.push(tape.mean_all(a));
    }
    tape.add(terms[0], terms[1])
}

/// Least-squares discriminator objective: label 1 on `d_real`, 0 on `d_fake`.
pub fn disc_pair<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let shifted = tape.add_scalar(d_real, -1.0);
    let real_sq = tape.square(shifted);
    let real_term = tape.mean_all(real_sq);
    let fake_sq = tape.square(d_fake);
    let fake_term = tape.mean_all(fake_sq);
    tape.add(real_term, fake_term)
}

/// Weighted l1 + alpha*ssim + beta*adv combination shared by the image
/// cycle and the two consistency losses. `adv` is absent when the
/// adversarial term is disabled.
pub fn composite<T: Scalar>(
    tape: &mut Tape<T>,
    l1_term: Var,
    ssim_term: Var,
    adv_term: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Var {
    let s = tape.mul_scalar(ssim_term, alpha);
    let mut out = tape.add(l1_term, s);
    if let Some(adv) = adv_term {
        let a = tape.mul_scalar(adv, beta);
        out = tape.add(out, a);
    }
    out
}

/// The six weighted generator components, in contract order.
pub struct GeneratorParts {
    pub i_cyc: Var,
    pub f_cyc: Var,
    pub hr_con: Var,
    pub lr_con: Var,
    pub da: Option<Var>,
    pub fa: Option<Var>,
}

/// End-to-end generator objective: the lambda-weighted sum of the parts.
pub fn total_generator<T: Scalar>(tape: &mut Tape<T>, parts: &GeneratorParts, w: &LossWeights) -> Var {
    let mut acc = tape.mul_scalar(parts.i_cyc, w.lambda1);
    for (term, lambda) in [
        (Some(parts.f_cyc), w.lambda2),
        (Some(parts.hr_con), w.lambda3),
        (Some(parts.lr_con), w.lambda4),
        (parts.da, w.lambda5),
        (parts.fa, w.lambda6),
    ] {
        if let Some(t) = term {
            let scaled = tape.mul_scalar(t, lambda);
            acc = tape.add(acc, scaled);
        }
    }
    acc
}

/// One named numeric check of the closed-form loss examples.
pub struct Check {
    pub name: &'static str,
    pub got: f64,
    pub expected: f64,
}

/// The closed-form loss-equation examples, evaluated at precision `T`.
/// Callers assert |got - expected| against the tolerance appropriate for
/// the precision.
pub fn trivial_example_suite<T: Scalar>() -> Vec<Check> {
    let fill = |shape: (usize, usize, usize, usize, usize), v: f64| {
        Array5::<T>::from_elem(shape, T::from_f64(v))
    };
    let mut checks = Vec::new();
    let shape = (2, 1, 4, 4, 3);

    // L1.
    {
        let mut t = Tape::new();
        let x = t.constant(fill(shape, 0.37));
        let y = t.constant(fill(shape, 0.37));
        let v = l1(&mut t, x, y).unwrap();
        checks.push(Check { name: "l1 identical", got: scalar_value(t.value(v)).into_f64(), expected: 0.0 });
    }
    {
        let mut t = Tape::new();
        let mut xv = fill((1, 1, 2, 1, 1), 0.0);
        xv[[0, 0, 0, 0, 0]] = T::from_f64(1.0);
        let x = t.constant(xv);
        let y = t.constant(fill((1, 1, 2, 1, 1), 0.0));
        let v = l1(&mut t, x, y).unwrap();
        checks.push(Check { name: "l1 half", got: scalar_value(t.value(v)).into_f64(), expected: 0.5 });
    }
    {
        let mut t = Tape::new();
        let x = t.constant(fill(shape, 0.9));
        let y = t.constant(fill(shape, 0.65));
        let v = l1(&mut t, x, y).unwrap();
        checks.push(Check { name: "l1 constant offset", got: scalar_value(t.value(v)).into_f64(), expected: 0.25 });
    }

    // SSIM penalty on stubbed SSIM values, and the full path on x = y.
    for (name, s, expected) in [
        ("ssim penalty at 0", 0.0, 1.0),
        ("ssim penalty at 0.5", 0.5, 0.75),
        ("ssim penalty at 1", 1.0, 0.0),
    ] {
        let mut t = Tape::new();
        let per_item = t.constant(fill((3, 1, 1, 1, 1), s));
        let v = ssim_penalty(&mut t, per_item);
        checks.push(Check { name, got: scalar_value(t.value(v)).into_f64(), expected });
    }
    {
        let mut t = Tape::new();
        let img = ramp_image::<T>((1, 1, 16, 16, 3), 11);
        let x = t.constant(img.clone());
        let y = t.constant(img);
        let v = ssim_loss(&mut t, x, y, &SsimConfig::default()).unwrap();
        checks.push(Check { name: "ssim loss identical", got: scalar_value(t.value(v)).into_f64(), expected: 0.0 });
    }

    // Adversarial generator term.
    for (name, d, expected) in [
        ("adv at 1", 1.0, 0.0),
        ("adv at 0", 0.0, 1.0),
        ("adv at 0.5", 0.5, 0.25),
    ] {
        let mut t = Tape::new();
        let dv = t.constant(fill((2, 1, 3, 3, 3), d));
        let v = adv_gen(&mut t, dv);
        checks.push(Check { name, got: scalar_value(t.value(v)).into_f64(), expected });
    }

    // Composite (image cycle / consistency) arithmetic.
    {
        let mut t = Tape::new();
        let l = t.constant(fill((1, 1, 1, 1, 1), 0.1));
        let s = t.constant(fill((1, 1, 1, 1, 1), 0.2));
        let a = t.constant(fill((1, 1, 1, 1, 1), 0.3));
        let v = composite(&mut t, l, s, Some(a), 0.5, 0.01);
        checks.push(Check { name: "composite 0.203", got: scalar_value(t.value(v)).into_f64(), expected: 0.203 });
    }
    {
        let mut t = Tape::new();
        let l = t.constant(fill((1, 1, 1, 1, 1), 0.1));
        let s = t.constant(fill((1, 1, 1, 1, 1), 0.2));
        let v = composite(&mut t, l, s, None, 0.5, 0.01);
        checks.push(Check { name: "composite beta off", got: scalar_value(t.value(v)).into_f64(), expected: 0.2 });
    }

    // Feature cycle is plain L1 on feature maps.
    {
        let mut t = Tape::new();
        let f_shape = (1, 4, 4, 4, 3);
        let a = t.constant(fill(f_shape, 0.6));
        let b = t.constant(fill(f_shape, 0.4));
        let v = l1(&mut t, a, b).unwrap();
        checks.push(Check { name: "feature cycle offset", got: scalar_value(t.value(v)).into_f64(), expected: 0.2 });
    }

    // Adaptation terms (image and feature space share the form).
    for (name, a, b, expected) in [
        ("da equilibrium", 0.5, 0.5, 0.0),
        ("da saturated", 1.0, 0.0, 1.0),
        ("da half", 0.5, 1.0, 0.5),
    ] {
        let mut t = Tape::new();
        let da_ = t.constant(fill((1, 1, 2, 2, 3), a));
        let db = t.constant(fill((1, 1, 2, 2, 3), b));
        let v = da_pair(&mut t, da_, db);
        checks.push(Check { name, got: scalar_value(t.value(v)).into_f64(), expected });
    }

    // Total generator objective at the operating-point weights.
    {
        let w = LossWeights::default();
        let mut t = Tape::new();
        let one = |t: &mut Tape<T>| t.constant(fill((1, 1, 1, 1, 1), 1.0));
        let parts = GeneratorParts {
            i_cyc: one(&mut t),
            f_cyc: one(&mut t),
            hr_con: one(&mut t),
            lr_con: one(&mut t),
            da: Some(one(&mut t)),
            fa: Some(one(&mut t)),
        };
        let v = total_generator(&mut t, &parts, &w);
        checks.push(Check { name: "total all ones", got: scalar_value(t.value(v)).into_f64(), expected: 3.3 });
    }
    {
        let w = LossWeights::default();
        let mut t = Tape::new();
        let zero = |t: &mut Tape<T>| t.constant(fill((1, 1, 1, 1, 1), 0.0));
        let parts = GeneratorParts {
            i_cyc: zero(&mut t),
            f_cyc: zero(&mut t),
            hr_con: zero(&mut t),
            lr_con: zero(&mut t),
            da: Some(zero(&mut t)),
            fa: Some(zero(&mut t)),
        };
        let v = total_generator(&mut t, &parts, &w);
        checks.push(Check { name: "total all zeros", got: scalar_value(t.value(v)).into_f64(), expected: 0.0 });
    }

    // Discriminator objectives.
    for (name, real, fake, expected) in [
        ("disc perfect", 1.0, 0.0, 0.0),
        ("disc undecided", 0.5, 0.5, 0.5),
        ("disc fooled", 0.0, 1.0, 2.0),
    ] {
        let mut t = Tape::new();
        let dr = t.constant(fill((2, 1, 2, 2, 3), real));
        let df = t.constant(fill((2, 1, 2, 2, 3), fake));
        let v = disc_pair(&mut t, dr, df);
        checks.push(Check { name, got: scalar_value(t.value(v)).into_f64(), expected });
    }

    checks
}

fn ramp_image<T: Scalar>(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    Array5::from_shape_fn(shape, |_| T::from_f64(rng.gen_range(0.0..1.0)))
}
