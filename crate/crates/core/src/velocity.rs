//! Parametric causal velocity families `v_θ(y, x)`.
//!
//! Every family evaluates `v`, `∂v/∂y` and `∂v/∂x` exactly, and returns exact
//! parameter gradients of any linear combination of the three. Basis families
//! do this in closed form; network families go through [`crate::mlp`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{self, Channels, MlpArch, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VelocityFamily {
    #[serde(rename = "B-LIN")]
    BLin,
    #[serde(rename = "B-QUAD")]
    BQuad,
    #[serde(rename = "B-LIN-EXP")]
    BLinExp,
    #[serde(rename = "B-QUAD-EXP")]
    BQuadExp,
    #[serde(rename = "V-ANM")]
    VAnm,
    #[serde(rename = "V-LSNM")]
    VLsnm,
    #[serde(rename = "V-NN")]
    VNn,
}

impl VelocityFamily {
    pub const ALL: [VelocityFamily; 7] = [
        VelocityFamily::BLin,
        VelocityFamily::BQuad,
        VelocityFamily::BLinExp,
        VelocityFamily::BQuadExp,
        VelocityFamily::VAnm,
        VelocityFamily::VLsnm,
        VelocityFamily::VNn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VelocityFamily::BLin => "B-LIN",
            VelocityFamily::BQuad => "B-QUAD",
            VelocityFamily::BLinExp => "B-LIN-EXP",
            VelocityFamily::BQuadExp => "B-QUAD-EXP",
            VelocityFamily::VAnm => "V-ANM",
            VelocityFamily::VLsnm => "V-LSNM",
            VelocityFamily::VNn => "V-NN",
        }
    }

    pub fn is_basis(self) -> bool {
        self.basis_len().is_some()
    }

    fn basis_len(self) -> Option<usize> {
        match self {
            VelocityFamily::BLin => Some(3),
            VelocityFamily::BQuad => Some(6),
            VelocityFamily::BLinExp => Some(6),
            VelocityFamily::BQuadExp => Some(9),
            _ => None,
        }
    }

    /// Default fitting network: two hidden tanh layers of width 64.
    pub fn default_arch(self) -> Option<MlpArch> {
        match self {
            VelocityFamily::VAnm | VelocityFamily::VLsnm => Some(MlpArch::new(1, vec![64, 64])),
            VelocityFamily::VNn => Some(MlpArch::new(2, vec![64, 64])),
            _ => None,
        }
    }

    pub fn param_count(self, arch: Option<&MlpArch>) -> Result<usize> {
        if let Some(k) = self.basis_len() {
            return Ok(k);
        }
        let arch = arch.ok_or_else(|| Error::InvalidInput(format!("{self} needs an architecture")))?;
        let want = if self == VelocityFamily::VNn { 2 } else { 1 };
        if arch.input_dim != want {
            return Err(Error::InvalidInput(format!(
                "{self} networks take {want} input(s), arch has {}",
                arch.input_dim
            )));
        }
        let per = arch.param_count();
        Ok(if self == VelocityFamily::VLsnm { 2 * per } else { per })
    }
}

impl fmt::Display for VelocityFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VelocityFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VelocityFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown velocity family {s:?}")))
    }
}

/// A velocity family together with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    pub family: VelocityFamily,
    pub arch: Option<MlpArch>,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Basis functions and their partial derivatives at one point.
fn basis(family: VelocityFamily, y: f64, x: f64, phi: &mut [f64], phi_y: &mut [f64], phi_x: &mut [f64]) {
    phi[..3].copy_from_slice(&[1.0, x, y]);
    phi_y[..3].copy_from_slice(&[0.0, 0.0, 1.0]);
    phi_x[..3].copy_from_slice(&[0.0, 1.0, 0.0]);
    let mut k = 3;
    if matches!(family, VelocityFamily::BQuad | VelocityFamily::BQuadExp) {
        phi[3..6].copy_from_slice(&[x * x, y * y, x * y]);
        phi_y[3..6].copy_from_slice(&[0.0, 2.0 * y, x]);
        phi_x[3..6].copy_from_slice(&[2.0 * x, 0.0, y]);
        k = 6;
    }
    if matches!(family, VelocityFamily::BLinExp | VelocityFamily::BQuadExp) {
        let ex = (-x * x).exp();
        let ey = (-y * y).exp();
        let exy = ex * ey;
        phi[k..k + 3].copy_from_slice(&[ex, ey, exy]);
        phi_y[k..k + 3].copy_from_slice(&[0.0, -2.0 * y * ey, -2.0 * y * exy]);
        phi_x[k..k + 3].copy_from_slice(&[-2.0 * x * ex, 0.0, -2.0 * x * exy]);
    }
}

/// Location-scale velocity `ṁ + ḣ (y − m)` from the jets `(m, ṁ, m̈)` and
/// `(h, ḣ, ḧ)`; returns `(v, ∂v/∂y, ∂v/∂x)`.
pub fn lsnm_velocity(m: (f64, f64, f64), h: (f64, f64, f64), y: f64) -> (f64, f64, f64) {
    let resid = y - m.0;
    let v = m.1 + h.1 * resid;
    let vy = h.1;
    let vx = m.2 + h.2 * resid - h.1 * m.1;
    (v, vy, vx)
}

enum Internal {
    Basis {
        k: usize,
        phi: Vec<f64>,
        phi_y: Vec<f64>,
        phi_x: Vec<f64>,
    },
    Anm(Tape),
    Nn(Tape),
    Lsnm {
        m: Tape,
        h: Tape,
        ys: Vec<f64>,
    },
}

/// Batched evaluation record: values plus what [`VelocityModel::backward`]
/// needs.
pub struct VelocityTape {
    pub v: Vec<f64>,
    pub dvdy: Vec<f64>,
    /// Present when requested in [`VelocityModel::forward`].
    pub dvdx: Option<Vec<f64>>,
    internal: Internal,
}

impl VelocityModel {
    pub fn new(family: VelocityFamily, arch: Option<MlpArch>, theta: Vec<f64>) -> Result<Self> {
        let want = family.param_count(arch.as_ref())?;
        if theta.len() != want {
            return Err(Error::InvalidInput(format!(
                "{family} expects {want} parameters, got {}",
                theta.len()
            )));
        }
        Ok(VelocityModel {
            family,
            arch: if family.is_basis() { None } else { arch },
            theta,
            seed: None,
        })
    }

    /// Basis coefficients start at zero; network weights ~ N(0, 1/fan_in),
    /// biases zero.
    pub fn init(family: VelocityFamily, arch: Option<MlpArch>, seed: u64) -> Result<Self> {
        let arch = if family.is_basis() {
            None
        } else {
            arch.or_else(|| family.default_arch())
        };
        let count = family.param_count(arch.as_ref())?;
        let theta = match (&arch, family) {
            (None, _) => vec![0.0; count],
            (Some(a), VelocityFamily::VLsnm) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = a.init_params(&mut rng);
                t.extend(a.init_params(&mut rng));
                t
            }
            (Some(a), _) => a.init_params(&mut ChaCha8Rng::seed_from_u64(seed)),
        };
        let mut model = VelocityModel::new(family, arch, theta)?;
        model.seed = Some(seed);
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn arch(&self) -> &MlpArch {
        self.arch.as_ref().expect("network family has an architecture")
    }

    /// Evaluates the velocity and its partials at every `(ys[i], xs[i])`.
    /// `∂v/∂x` is only computed when `with_dx` is set (it needs second-order
    /// network derivatives for V-LSNM).
    pub fn forward(&self, ys: &[f64], xs: &[f64], with_dx: bool) -> VelocityTape {
        assert_eq!(ys.len(), xs.len());
        let n = ys.len();
        match self.family {
            f if f.is_basis() => {
                let k = self.theta.len();
                let mut phi = vec![0.0; n * k];
                let mut phi_y = vec![0.0; n * k];
                let mut phi_x = vec![0.0; n * k];
                let (mut v, mut vy, mut vx) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let r = i * k..(i + 1) * k;
                    basis(f, ys[i], xs[i], &mut phi[r.clone()], &mut phi_y[r.clone()], &mut phi_x[r.clone()]);
                    let dot = |b: &[f64]| b.iter().zip(&self.theta).map(|(a, t)| a * t).sum::<f64>();
                    v[i] = dot(&phi[r.clone()]);
                    vy[i] = dot(&phi_y[r.clone()]);
                    vx[i] = dot(&phi_x[r]);
                }
                VelocityTape {
                    v,
                    dvdy: vy,
                    dvdx: with_dx.then_some(vx),
                    internal: Internal::Basis { k, phi, phi_y, phi_x },
                }
            }
            VelocityFamily::VAnm => {
                let ch = Channels {
                    first: usize::from(with_dx),
                    second: false,
                };
                let tape = mlp::forward(self.arch(), &self.theta, &[xs], ch);
                VelocityTape {
                    v: tape.value().to_vec(),
                    dvdy: vec![0.0; n],
                    dvdx: with_dx.then(|| tape.first(0).to_vec()),
                    internal: Internal::Anm(tape),
                }
            }
            VelocityFamily::VNn => {
                let ch = Channels {
                    first: 2,
                    second: false,
                };
                let tape = mlp::forward(self.arch(), &self.theta, &[xs, ys], ch);
                VelocityTape {
                    v: tape.value().to_vec(),
                    dvdy: tape.first(1).to_vec(),
                    dvdx: with_dx.then(|| tape.first(0).to_vec()),
                    internal: Internal::Nn(tape),
                }
            }
            VelocityFamily::VLsnm => {
                let arch = self.arch();
                let half = arch.param_count();
                let ch = Channels {
                    first: 1,
                    second: with_dx,
                };
                let m = mlp::forward(arch, &self.theta[..half], &[xs], ch);
                let h = mlp::forward(arch, &self.theta[half..], &[xs], ch);
                let (mut v, mut vy, mut vx) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let jet = |t: &Tape| {
                        (
                            t.value()[i],
                            t.first(0)[i],
                            if with_dx { t.second()[i] } else { 0.0 },
                        )
                    };
                    let (a, b, c) = lsnm_velocity(jet(&m), jet(&h), ys[i]);
                    v[i] = a;
                    vy[i] = b;
                    vx[i] = c;
                }
                VelocityTape {
                    v,
                    dvdy: vy,
                    dvdx: with_dx.then_some(vx),
                    internal: Internal::Lsnm {
                        m,
                        h,
                        ys: ys.to_vec(),
                    },
                }
            }
            _ => unreachable!(),
        }
    }

    /// Parameter gradient of `Σ_i adj_v[i]·v_i + adj_vy[i]·∂yv_i + adj_vx[i]·∂xv_i`.
    /// `adj_vx` may be empty; otherwise the tape must carry `∂v/∂x`.
    pub fn backward(&self, tape: &VelocityTape, adj_v: &[f64], adj_vy: &[f64], adj_vx: &[f64]) -> Vec<f64> {
        let n = tape.v.len();
        assert!(adj_v.len() == n && adj_vy.len() == n);
        assert!(adj_vx.is_empty() || (adj_vx.len() == n && tape.dvdx.is_some()));
        let mut grad = vec![0.0; self.theta.len()];
        match &tape.internal {
            Internal::Basis { k, phi, phi_y, phi_x } => {
                for i in 0..n {
                    let r = i * k..(i + 1) * k;
                    let ax = adj_vx.get(i).copied().unwrap_or(0.0);
                    for ((g, (p, py)), px) in grad
                        .iter_mut()
                        .zip(phi[r.clone()].iter().zip(&phi_y[r.clone()]))
                        .zip(&phi_x[r])
                    {
                        *g += adj_v[i] * p + adj_vy[i] * py + ax * px;
                    }
                }
            }
            Internal::Anm(t) => {
                let adj: Vec<&[f64]> = if t.first_count() == 1 {
                    vec![adj_v, adj_vx]
                } else {
                    vec![adj_v]
                };
                mlp::backward(self.arch(), &self.theta, t, &adj, &mut grad);
            }
            Internal::Nn(t) => {
                mlp::backward(self.arch(), &self.theta, t, &[adj_v, adj_vx, adj_vy], &mut grad);
            }
            Internal::Lsnm { m, h, ys } => {
                let half = self.arch().param_count();
                let second = m.has_second();
                let (mut mb0, mut mb1, mut mb2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let (mut hb1, mut hb2) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (mv, md) = (m.value()[i], m.first(0)[i]);
                    let hd = h.first(0)[i];
                    let resid = ys[i] - mv;
                    // v = ṁ + ḣ (y − m)
                    mb1[i] += adj_v[i];
                    hb1[i] += adj_v[i] * resid;
                    mb0[i] -= adj_v[i] * hd;
                    // ∂v/∂y = ḣ
                    hb1[i] += adj_vy[i];
                    // ∂v/∂x = m̈ + ḧ (y − m) − ḣ ṁ
                    if let Some(&ax) = adj_vx.get(i) {
                        let hdd = h.second()[i];
                        mb2[i] += ax;
                        hb2[i] += ax * resid;
                        mb0[i] -= ax * hdd;
                        hb1[i] -= ax * md;
                        mb1[i] -= ax * hd;
                    }
                }
                let (gm, gh) = grad.split_at_mut(half);
                let empty: &[f64] = &[];
                if second {
                    mlp::backward(self.arch(), &self.theta[..half], m, &[&mb0, &mb1, &mb2], gm);
                    mlp::backward(self.arch(), &self.theta[half..], h, &[empty, &hb1, &hb2], gh);
                } else {
                    mlp::backward(self.arch(), &self.theta[..half], m, &[&mb0, &mb1], gm);
                    mlp::backward(self.arch(), &self.theta[half..], h, &[empty, &hb1], gh);
                }
            }
        }
        grad
    }

    /// `(v, ∂v/∂y)` at a single point.
    pub fn eval(&self, y: f64, x: f64) -> (f64, f64) {
        let t = self.forward(&[y], &[x], false);
        (t.v[0], t.dvdy[0])
    }

    /// `(∂v/∂θ, ∂(∂v/∂y)/∂θ)` at a single point.
    pub fn eval_grad(&self, y: f64, x: f64) -> (Vec<f64>, Vec<f64>) {
        let t = self.forward(&[y], &[x], false);
        let dv = self.backward(&t, &[1.0], &[0.0], &[]);
        let dvy = self.backward(&t, &[0.0], &[1.0], &[]);
        (dv, dvy)
    }

    /// The velocity as a plain function `(y, x) ↦ v`, for integration.
    pub fn as_fn(&self) -> impl Fn(f64, f64) -> f64 + '_ {
        move |y, x| self.forward(&[y], &[x], false).v[0]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: VelocityModel =
            serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
        VelocityModel::new(m.family, m.arch.clone(), m.theta.clone()).map(|mut checked| {
            checked.seed = m.seed;
            checked
        })
    }
}

/// `(v, ∂v/∂y)` at `(y, x)`.
pub fn eval_velocity(model: &VelocityModel, y: f64, x: f64) -> (f64, f64) {
    model.eval(y, x)
}

/// `(∂v/∂θ, ∂(∂v/∂y)/∂θ)` at `(y, x)`.
pub fn eval_velocity_grad(model: &VelocityModel, y: f64, x: f64) -> (Vec<f64>, Vec<f64>) {
    model.eval_grad(y, x)
}

pub fn init_params(family: VelocityFamily, arch: Option<MlpArch>, seed: u64) -> Result<Vec<f64>> {
    VelocityModel::init(family, arch, seed).map(|m| m.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch(family: VelocityFamily) -> Option<MlpArch> {
        match family {
            VelocityFamily::VNn => Some(MlpArch::new(2, vec![8, 8])),
            f if f.is_basis() => None,
            _ => Some(MlpArch::new(1, vec![8, 8])),
        }
    }

    fn random_model(family: VelocityFamily, rng: &mut ChaCha8Rng) -> VelocityModel {
        let arch = small_arch(family);
        let k = family.param_count(arch.as_ref()).unwrap();
        let theta = (0..k).map(|_| rng.random_range(-0.8..0.8)).collect();
        VelocityModel::new(family, arch, theta).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let counts: Vec<usize> = [
            VelocityFamily::BLin,
            VelocityFamily::BQuad,
            VelocityFamily::BLinExp,
            VelocityFamily::BQuadExp,
        ]
        .iter()
        .map(|f| f.param_count(None).unwrap())
        .collect();
        assert_eq!(counts, vec![3, 6, 6, 9]);
        let nn = init_params(VelocityFamily::VNn, None, 0).unwrap();
        assert_eq!(nn.len(), 4417);
    }

    #[test]
    fn basis_init_is_zero() {
        let m = VelocityModel::init(VelocityFamily::BLin, None, 5).unwrap();
        assert_eq!(m.theta, vec![0.0; 3]);
        assert_eq!(m.eval(1.3, -0.2), (0.0, 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        for f in VelocityFamily::ALL {
            assert_eq!(init_params(f, None, 9).unwrap(), init_params(f, None, 9).unwrap());
        }
        assert_ne!(
            init_params(VelocityFamily::VNn, None, 1).unwrap(),
            init_params(VelocityFamily::VNn, None, 2).unwrap()
        );
    }

    #[test]
    fn blin_reads_coefficients() {
        let m = VelocityModel::new(VelocityFamily::BLin, None, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.eval(2.5, -1.0), (2.5, 1.0));
    }

    #[test]
    fn bquad_gradient_by_hand() {
        let m = VelocityModel::new(VelocityFamily::BQuad, None, vec![0.3; 6]).unwrap();
        let (dv, dvy) = m.eval_grad(1.0, 2.0);
        assert_eq!(dv, vec![1.0, 2.0, 1.0, 4.0, 1.0, 2.0]);
        assert_eq!(dvy, vec![0.0, 0.0, 1.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn lsnm_with_identity_stubs() {
        let (v, vy, _) = lsnm_velocity((0.7, 1.0, 0.0), (0.7, 1.0, 0.0), 2.0);
        assert_eq!(v, 1.0 + (2.0 - 0.7));
        assert_eq!(vy, 1.0);
    }

    #[test]
    fn anm_is_constant_in_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(VelocityFamily::VAnm, &mut rng);
        for _ in 0..20 {
            let x = rng.random_range(-2.0..2.0);
            let (a, da) = m.eval(rng.random_range(-3.0..3.0), x);
            let (b, db) = m.eval(rng.random_range(-3.0..3.0), x);
            assert_eq!(a, b);
            assert_eq!((da, db), (0.0, 0.0));
        }
        let (_, dvy) = m.eval_grad(0.4, 0.1);
        assert!(dvy.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lsnm_is_affine_in_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(VelocityFamily::VLsnm, &mut rng);
        for _ in 0..20 {
            let x = rng.random_range(-2.0..2.0);
            let y = rng.random_range(-2.0..2.0);
            let d = 0.37;
            let second = m.eval(y + d, x).0 - 2.0 * m.eval(y, x).0 + m.eval(y - d, x).0;
            assert!(second.abs() < 1e-10);
        }
    }

    #[test]
    fn dx_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for f in VelocityFamily::ALL {
            let m = random_model(f, &mut rng);
            let (y, x) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let t = m.forward(&[y], &[x], true);
            let h = 1e-5;
            let fd = (m.eval(y, x + h).0 - m.eval(y, x - h).0) / (2.0 * h);
            let got = t.dvdx.unwrap()[0];
            assert!((got - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{f}: {got} vs {fd}");
        }
    }

    #[test]
    fn backward_with_dx_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ys = [0.3, -0.8, 1.1];
        let xs = [-0.5, 0.9, 0.2];
        let av = [0.4, -0.3, 0.8];
        let ay = [-0.6, 0.2, 0.5];
        let ax = [0.7, 0.1, -0.9];
        for f in VelocityFamily::ALL {
            let m = random_model(f, &mut rng);
            let obj = |theta: &[f64]| {
                let mm = VelocityModel::new(f, m.arch.clone(), theta.to_vec()).unwrap();
                let t = mm.forward(&ys, &xs, true);
                let vx = t.dvdx.unwrap();
                (0..3).map(|i| av[i] * t.v[i] + ay[i] * t.dvdy[i] + ax[i] * vx[i]).sum::<f64>()
            };
            let t = m.forward(&ys, &xs, true);
            let g = m.backward(&t, &av, &ay, &ax);
            let h = 1e-6;
            for k in (0..m.theta.len()).step_by(7) {
                let mut p = m.theta.clone();
                p[k] += h;
                let up = obj(&p);
                p[k] -= 2.0 * h;
                let fd = (up - obj(&p)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{f} param {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in VelocityFamily::ALL {
            assert_eq!(f.name().parse::<VelocityFamily>().unwrap(), f);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{}\"", f.name()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = VelocityModel::init(VelocityFamily::VAnm, Some(MlpArch::new(1, vec![4])), 3).unwrap();
        m.save(&path).unwrap();
        assert_eq!(VelocityModel::load(&path).unwrap(), m);
    }
}
