//! Gradient combination solvers.
//!
//! The primary solver resolves the conflict between an attack gradient `a`
//! and a stealth gradient `c` by maximizing the worst-case first-order
//! improvement over the interpolated family g_w = w*a + (1-w)*c, subject to
//! an ellipsoidal trust region ||d - a||_M <= rho centered at the attack
//! gradient. The metric M = I + lambda*u*u^T penalizes movement along the
//! deviation axis u (from the normalized attack gradient toward the
//! normalized stealth gradient), with anisotropy lambda = kappa*(1 - s)
//! growing as the cosine s between the gradients drops.
//!
//! The inner maximization has the closed form d(w) = a + rho * M^{-1}g_w /
//! ||g_w||_{M^-1}, leaving a one-dimensional convex program in w that a
//! scalar minimizer handles. M is never materialized: being a rank-one
//! update of the identity, M^{-1}g costs O(F).
//!
//! Baselines used by the ablations (plain sum, PCGrad, CAGrad, Euclidean
//! trust region) and a one-step descent-bound checker on quadratic
//! objectives live here too.

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_KAPPA: f64 = 10.0;
pub const DEFAULT_EPS_NUM: f64 = 1e-12;

/// Attack gradient / stealth gradient pair, flattened over all perturbation
/// coordinates.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub attack: Vec<f64>,
    pub stealth: Vec<f64>,
}

impl GradPair {
    pub fn new(attack: Vec<f64>, stealth: Vec<f64>) -> Result<Self> {
        if attack.len() != stealth.len() {
            return Err(Error::ShapeMismatch {
                op: "GradPair::new",
                lhs: vec![attack.len()],
                rhs: vec![stealth.len()],
            });
        }
        if !attack.iter().chain(stealth.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("GradPair::new", "non-finite gradient entry"));
        }
        Ok(GradPair { attack, stealth })
    }

    pub fn dim(&self) -> usize {
        self.attack.len()
    }
}

/// Rank-one ellipsoidal metric M = I + lambda * u u^T.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    /// Unit deviation axis, or the zero vector when the gradients align.
    pub u: Vec<f64>,
    pub lambda: f64,
    pub kappa: f64,
    pub eps_num: f64,
    /// Guarded cosine between the pair that built this metric.
    pub cosine: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Guarded cosine similarity: s = a.c / ((||a|| + eps)(||c|| + eps)).
/// Zero vectors give s = 0.
pub fn cosine(a: &[f64], c: &[f64], eps_num: f64) -> f64 {
    dot(a, c) / ((l2_norm(a) + eps_num) * (l2_norm(c) + eps_num))
}

/// Construct the deviation axis and anisotropy from a gradient pair.
pub fn build_metric(pair: &GradPair, kappa: f64, eps_num: f64) -> Result<MetricSpec> {
    if kappa < 0.0 {
        return Err(Error::invalid("build_metric", "kappa must be >= 0"));
    }
    let (a, c) = (&pair.attack, &pair.stealth);
    let s = cosine(a, c, eps_num);
    let na = l2_norm(a) + eps_num;
    let nc = l2_norm(c) + eps_num;
    let diff: Vec<f64> = a
        .iter()
        .zip(c)
        .map(|(&av, &cv)| cv / nc - av / na)
        .collect();
    let nd = l2_norm(&diff);
    let u = if nd > eps_num {
        diff.iter().map(|v| v / nd).collect()
    } else {
        vec![0.0; pair.dim()]
    };
    Ok(MetricSpec {
        u,
        lambda: kappa * (1.0 - s),
        kappa,
        eps_num,
        cosine: s,
    })
}

/// M^{-1} g = g - (lambda / (1 + lambda)) * u * (u^T g), in O(F).
pub fn minv_apply(metric: &MetricSpec, g: &[f64]) -> Vec<f64> {
    let factor = metric.lambda / (1.0 + metric.lambda);
    let ug = dot(&metric.u, g);
    g.iter()
        .zip(&metric.u)
        .map(|(&gv, &uv)| gv - factor * uv * ug)
        .collect()
}

/// ||v||_M^2 = ||v||^2 + lambda * (u^T v)^2.
pub fn m_norm_sq(metric: &MetricSpec, v: &[f64]) -> f64 {
    let uv = dot(&metric.u, v);
    dot(v, v) + metric.lambda * uv * uv
}

/// Solution of the trust-region alignment problem.
#[derive(Debug, Clone)]
pub struct AlignSolution {
    /// Aligned update direction d*.
    pub direction: Vec<f64>,
    /// Optimal interpolation weight in [0, 1].
    pub w_star: f64,
    pub metric: MetricSpec,
    /// Trust radius rho = gamma * ||a||.
    pub rho: f64,
    /// Euclidean shrink factor ||p*||_2; absent in the fallback regime.
    pub xi: Option<f64>,
    /// phi(w*) = a.g_w* + rho * ||g_w*||_{M^-1}.
    pub objective: f64,
    pub fallback: bool,
}

impl AlignSolution {
    pub fn lambda(&self) -> f64 {
        self.metric.lambda
    }
}

/// Euclidean shrink factor of the solution. Undefined (signaled) when the
/// solver fell back to the attack-only direction.
pub fn compute_xi(solution: &AlignSolution) -> Result<f64> {
    solution.xi.ok_or(Error::FallbackUndefined { what: "xi" })
}

/// Brent-style scalar minimization on [lo, hi]: golden-section with
/// parabolic acceleration. Returns (x, f(x)).
pub fn minimize_scalar(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105; // 2 - golden ratio
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // parabolic fit through (v, w, x)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Solve the priority-aware trust-region problem for the aligned direction.
///
/// rho = gamma * ||a||; w* minimizes phi(w) = a.g_w + rho * ||g_w||_{M^-1}
/// over [0, 1]; d = a + rho * M^{-1} g_w* / ||g_w*||_{M^-1}. Falls back to
/// d = a when either ||a|| or the dual norm of g_w* is numerically zero.
pub fn solve_direction(
    pair: &GradPair,
    gamma: f64,
    kappa: f64,
    eps_num: f64,
) -> Result<AlignSolution> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(
            "solve_direction",
            format!("gamma {gamma} outside (0, 1)"),
        ));
    }
    let metric = build_metric(pair, kappa, eps_num)?;
    let (a, c) = (&pair.attack, &pair.stealth);
    let norm_a = l2_norm(a);
    let rho = gamma * norm_a;

    if norm_a <= eps_num {
        return Ok(AlignSolution {
            direction: a.clone(),
            w_star: 1.0,
            metric,
            rho,
            xi: None,
            objective: 0.0,
            fallback: true,
        });
    }

    // phi(w) in O(1) from precomputed dot products
    let aa = dot(a, a);
    let ac = dot(a, c);
    let cc = dot(c, c);
    let ua = dot(&metric.u, a);
    let uc = dot(&metric.u, c);
    let factor = metric.lambda / (1.0 + metric.lambda);
    let phi = |w: f64| -> f64 {
        let a_gw = w * aa + (1.0 - w) * ac;
        let gg = w * w * aa + 2.0 * w * (1.0 - w) * ac + (1.0 - w) * (1.0 - w) * cc;
        let ug = w * ua + (1.0 - w) * uc;
        let dual_sq = (gg - factor * ug * ug).max(0.0);
        a_gw + rho * dual_sq.sqrt()
    };

    let (wb, fb) = minimize_scalar(phi, 0.0, 1.0, 1e-6, 200);
    let mut w_star = wb;
    let mut best = fb;
    for cand in [0.0, 1.0] {
        let f = phi(cand);
        if f < best {
            best = f;
            w_star = cand;
        }
    }

    let g_star: Vec<f64> = a
        .iter()
        .zip(c)
        .map(|(&av, &cv)| w_star * av + (1.0 - w_star) * cv)
        .collect();
    let minv_g = minv_apply(&metric, &g_star);
    let dual_norm = dot(&g_star, &minv_g).max(0.0).sqrt();

    if dual_norm <= eps_num {
        return Ok(AlignSolution {
            direction: a.clone(),
            w_star,
            metric,
            rho,
            xi: None,
            objective: dot(a, &g_star),
            fallback: true,
        });
    }

    let p_star: Vec<f64> = minv_g.iter().map(|v| v / dual_norm).collect();
    let xi = l2_norm(&p_star);
    let direction: Vec<f64> = a
        .iter()
        .zip(&p_star)
        .map(|(&av, &pv)| av + rho * pv)
        .collect();
    let objective = dot(a, &g_star) + rho * dual_norm;

    Ok(AlignSolution {
        direction,
        w_star,
        metric,
        rho,
        xi: Some(xi),
        objective,
        fallback: false,
    })
}

/// Ablation baselines for combining the two gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    /// a + c
    Sum,
    /// project each gradient off the other when they conflict, then add
    PcGrad,
    /// conflict-averse direction with scalar hyperparameter `c`
    CaGrad { c: f64 },
    /// the ellipsoidal solver with kappa forced to 0 (M = I)
    EuclidTr { gamma: f64, eps_num: f64 },
}

pub fn baseline_combine(pair: &GradPair, method: BaselineMethod) -> Result<Vec<f64>> {
    let (a, c) = (&pair.attack, &pair.stealth);
    match method {
        BaselineMethod::Sum => Ok(a.iter().zip(c).map(|(&x, &y)| x + y).collect()),
        BaselineMethod::PcGrad => {
            let ac = dot(a, c);
            if ac >= 0.0 {
                return Ok(a.iter().zip(c).map(|(&x, &y)| x + y).collect());
            }
            let cc = dot(c, c);
            let aa = dot(a, a);
            let a_proj: Vec<f64> = if cc > 0.0 {
                a.iter().zip(c).map(|(&x, &y)| x - ac / cc * y).collect()
            } else {
                a.clone()
            };
            let c_proj: Vec<f64> = if aa > 0.0 {
                c.iter().zip(a).map(|(&y, &x)| y - ac / aa * x).collect()
            } else {
                c.clone()
            };
            Ok(a_proj.iter().zip(&c_proj).map(|(&x, &y)| x + y).collect())
        }
        BaselineMethod::CaGrad { c: ch } => {
            let g0: Vec<f64> = a.iter().zip(c).map(|(&x, &y)| 0.5 * (x + y)).collect();
            let scale = ch * l2_norm(&g0);
            let ag0 = dot(a, &g0);
            let cg0 = dot(c, &g0);
            let aa = dot(a, a);
            let ac = dot(a, c);
            let cc = dot(c, c);
            let psi = |w: f64| -> f64 {
                let g_g0 = w * ag0 + (1.0 - w) * cg0;
                let gg = w * w * aa + 2.0 * w * (1.0 - w) * ac + (1.0 - w) * (1.0 - w) * cc;
                g_g0 + scale * gg.max(0.0).sqrt()
            };
            let (wb, fb) = minimize_scalar(psi, 0.0, 1.0, 1e-6, 200);
            let mut w_star = wb;
            let mut best = fb;
            for cand in [0.0, 1.0] {
                let f = psi(cand);
                if f < best {
                    best = f;
                    w_star = cand;
                }
            }
            let g_w: Vec<f64> = a
                .iter()
                .zip(c)
                .map(|(&x, &y)| w_star * x + (1.0 - w_star) * y)
                .collect();
            let ng = l2_norm(&g_w);
            if ng <= DEFAULT_EPS_NUM {
                return Ok(g0);
            }
            Ok(g0
                .iter()
                .zip(&g_w)
                .map(|(&g0v, &gv)| g0v + scale * gv / ng)
                .collect())
        }
        BaselineMethod::EuclidTr { gamma, eps_num } => {
            Ok(solve_direction(pair, gamma, 0.0, eps_num)?.direction)
        }
    }
}

/// Quadratic attack objective 0.5 (d - c0)^T H (d - c0) with a supplied
/// smoothness constant (the top Hessian eigenvalue) and an arbitrary
/// stealth gradient.
#[derive(Debug, Clone)]
pub struct QuadraticSpec {
    pub dim: usize,
    /// Row-major symmetric positive definite Hessian.
    pub hessian: Vec<f64>,
    /// Minimizer of the quadratic.
    pub center: Vec<f64>,
    /// lambda_max(H).
    pub lipschitz: f64,
    /// Current iterate.
    pub delta: Vec<f64>,
    /// Stealth gradient at the current iterate.
    pub stealth_grad: Vec<f64>,
}

impl QuadraticSpec {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(&a, &b)| a - b).collect();
        0.5 * dot(&d, &self.matvec(&d))
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(&a, &b)| a - b).collect();
        self.matvec(&d)
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = dot(&self.hessian[i * n..(i + 1) * n], v);
        }
        out
    }

    /// Cholesky feasibility probe.
    fn is_positive_definite(&self) -> bool {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.hessian[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return false;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        true
    }
}

/// Result of one verified descent step on a quadratic objective.
#[derive(Debug, Clone)]
pub struct DescentCheck {
    pub xi: f64,
    pub step_size: f64,
    pub actual_decrease: f64,
    pub bound: f64,
    pub violated: bool,
}

/// Take one step along the aligned direction with the theorem's step size
/// eta = (1 - gamma*xi) / (L (1 + gamma*xi)^2) and compare the realized
/// decrease of the quadratic against the guaranteed
/// (1 - gamma*xi)^2 / (2L (1 + gamma*xi)^2) * ||a||^2.
pub fn check_descent(
    spec: &QuadraticSpec,
    gamma: f64,
    kappa: f64,
    eps_num: f64,
) -> Result<DescentCheck> {
    if spec.hessian.len() != spec.dim * spec.dim {
        return Err(Error::invalid("check_descent", "hessian size != dim^2"));
    }
    if !spec.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let a = spec.gradient(&spec.delta);
    let pair = GradPair::new(a.clone(), spec.stealth_grad.clone())?;
    let sol = solve_direction(&pair, gamma, kappa, eps_num)?;

    if sol.fallback {
        // at (or numerically at) the minimum: zero step, zero bound
        return Ok(DescentCheck {
            xi: 1.0,
            step_size: 0.0,
            actual_decrease: 0.0,
            bound: 0.0,
            violated: false,
        });
    }

    let xi = sol.xi.expect("not fallback");
    let l = spec.lipschitz;
    let eta = (1.0 - gamma * xi) / (l * (1.0 + gamma * xi).powi(2));
    let next: Vec<f64> = spec
        .delta
        .iter()
        .zip(&sol.direction)
        .map(|(&d, &dir)| d - eta * dir)
        .collect();
    let actual = spec.objective(&spec.delta) - spec.objective(&next);
    let na2 = dot(&a, &a);
    let bound = (1.0 - gamma * xi).powi(2) / (2.0 * l * (1.0 + gamma * xi).powi(2)) * na2;
    Ok(DescentCheck {
        xi,
        step_size: eta,
        actual_decrease: actual,
        bound,
        violated: actual < bound - 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(a: Vec<f64>, c: Vec<f64>) -> GradPair {
        GradPair::new(a, c).unwrap()
    }

    #[test]
    fn cosine_worked_cases() {
        let e = DEFAULT_EPS_NUM;
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0], e) - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0], e), 0.0);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0], e) + 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0], e), 0.0);
    }

    #[test]
    fn metric_worked_cases() {
        let m = build_metric(&pair(vec![1.0, 0.0], vec![1.0, 0.0]), 10.0, DEFAULT_EPS_NUM).unwrap();
        assert!(m.lambda.abs() < 1e-9);
        assert_eq!(m.u, vec![0.0, 0.0]);

        let m = build_metric(&pair(vec![1.0, 0.0], vec![0.0, 1.0]), 10.0, DEFAULT_EPS_NUM).unwrap();
        assert!((m.lambda - 10.0).abs() < 1e-9);
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((m.u[0] + inv_sqrt2).abs() < 1e-9 && (m.u[1] - inv_sqrt2).abs() < 1e-9);

        let m = build_metric(
            &pair(vec![1.0, 0.0], vec![-1.0, 0.0]),
            10.0,
            DEFAULT_EPS_NUM,
        )
        .unwrap();
        assert!((m.lambda - 20.0).abs() < 1e-9);
        assert!((m.u[0] + 1.0).abs() < 1e-9 && m.u[1].abs() < 1e-9);
    }

    #[test]
    fn minv_matches_dense_inverse() {
        let metric = MetricSpec {
            u: vec![1.0, 0.0],
            lambda: 3.0,
            kappa: 3.0,
            eps_num: DEFAULT_EPS_NUM,
            cosine: 0.0,
        };
        // M = [[4, 0], [0, 1]]
        let out = minv_apply(&metric, &[2.0, 1.0]);
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);

        let id = MetricSpec {
            u: vec![0.0, 0.0],
            lambda: 0.0,
            kappa: 0.0,
            eps_num: DEFAULT_EPS_NUM,
            cosine: 1.0,
        };
        assert_eq!(minv_apply(&id, &[2.0, -1.5]), vec![2.0, -1.5]);
    }

    #[test]
    fn aligned_gradients_extend_the_attack_direction() {
        // c = a: lambda = 0, g_w = a for every w, d = a + gamma*||a||*a_hat
        let sol = solve_direction(
            &pair(vec![1.0, 0.0], vec![1.0, 0.0]),
            0.5,
            10.0,
            DEFAULT_EPS_NUM,
        )
        .unwrap();
        assert!(!sol.fallback);
        assert!((sol.direction[0] - 1.5).abs() < 1e-9, "{:?}", sol.direction);
        assert!(sol.direction[1].abs() < 1e-12);
        assert!((compute_xi(&sol).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn opposed_gradients_shrink_along_the_deviation_axis() {
        let sol = solve_direction(
            &pair(vec![1.0, 0.0], vec![-1.0, 0.0]),
            0.5,
            10.0,
            DEFAULT_EPS_NUM,
        )
        .unwrap();
        assert!(!sol.fallback);
        assert!(sol.w_star < 1e-6, "w* = {}", sol.w_star);
        let expect = 1.0 - 0.5 / (1.0 + sol.lambda()).sqrt();
        assert!((sol.direction[0] - expect).abs() < 1e-9);
        assert!(sol.direction[1].abs() < 1e-12);
        // lower bound of xi attained
        let xi = compute_xi(&sol).unwrap();
        assert!((xi - 1.0 / (1.0 + sol.lambda()).sqrt()).abs() < 1e-12);
        assert!((sol.direction[0] - 0.8909).abs() < 1e-4);
    }

    #[test]
    fn zero_attack_gradient_falls_back() {
        let sol = solve_direction(
            &pair(vec![0.0, 0.0], vec![1.0, 1.0]),
            0.5,
            10.0,
            DEFAULT_EPS_NUM,
        )
        .unwrap();
        assert!(sol.fallback);
        assert_eq!(sol.direction, vec![0.0, 0.0]);
        assert!(compute_xi(&sol).is_err());
    }

    #[test]
    fn gamma_out_of_range_is_rejected() {
        assert!(solve_direction(&pair(vec![1.0], vec![1.0]), 1.0, 10.0, DEFAULT_EPS_NUM).is_err());
        assert!(solve_direction(&pair(vec![1.0], vec![1.0]), 0.0, 10.0, DEFAULT_EPS_NUM).is_err());
    }

    #[test]
    fn pcgrad_worked_cases() {
        let d = baseline_combine(
            &pair(vec![1.0, 0.0], vec![1.0, 1.0]),
            BaselineMethod::PcGrad,
        )
        .unwrap();
        assert_eq!(d, vec![2.0, 1.0]); // no conflict, plain sum

        let d = baseline_combine(
            &pair(vec![1.0, 0.0], vec![-1.0, 1.0]),
            BaselineMethod::PcGrad,
        )
        .unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12, "{d:?}");
        assert!((d[1] - 1.5).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn euclid_baseline_is_kappa_zero_bitwise() {
        let p = pair(vec![0.3, -1.2, 0.7], vec![-0.5, 0.4, 0.1]);
        let via_solver = solve_direction(&p, 0.5, 0.0, DEFAULT_EPS_NUM)
            .unwrap()
            .direction;
        let via_baseline = baseline_combine(
            &p,
            BaselineMethod::EuclidTr {
                gamma: 0.5,
                eps_num: DEFAULT_EPS_NUM,
            },
        )
        .unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&via_solver), bits(&via_baseline));
    }

    #[test]
    fn descent_rejects_indefinite_hessian() {
        let spec = QuadraticSpec {
            dim: 2,
            hessian: vec![1.0, 0.0, 0.0, -1.0],
            center: vec![0.0, 0.0],
            lipschitz: 1.0,
            delta: vec![1.0, 1.0],
            stealth_grad: vec![0.1, 0.1],
        };
        assert!(matches!(
            check_descent(&spec, 0.5, 10.0, DEFAULT_EPS_NUM),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn descent_at_minimum_is_trivially_satisfied() {
        let spec = QuadraticSpec {
            dim: 2,
            hessian: vec![2.0, 0.0, 0.0, 1.0],
            center: vec![0.3, -0.4],
            lipschitz: 2.0,
            delta: vec![0.3, -0.4],
            stealth_grad: vec![0.5, 0.5],
        };
        let check = check_descent(&spec, 0.5, 10.0, DEFAULT_EPS_NUM).unwrap();
        assert!(!check.violated);
        assert_eq!(check.bound, 0.0);
        assert_eq!(check.actual_decrease, 0.0);
    }

    #[test]
    fn lambda_zero_recovers_isotropic_step_size() {
        // c = a makes lambda = 0 and xi = 1
        let spec = QuadraticSpec {
            dim: 2,
            hessian: vec![3.0, 0.0, 0.0, 1.0],
            center: vec![0.0, 0.0],
            lipschitz: 3.0,
            delta: vec![1.0, 2.0],
            stealth_grad: vec![3.0, 2.0], // equals H*delta = a
        };
        let gamma = 0.5;
        let check = check_descent(&spec, gamma, 10.0, DEFAULT_EPS_NUM).unwrap();
        let eta_iso = (1.0 - gamma) / (spec.lipschitz * (1.0 + gamma).powi(2));
        assert!((check.xi - 1.0).abs() < 1e-9);
        assert!((check.step_size - eta_iso).abs() < 1e-12);
        assert!(!check.violated);
    }

    #[test]
    fn brent_finds_quadratic_minimum() {
        let (x, fx) = minimize_scalar(|w| (w - 0.37).powi(2) + 1.0, 0.0, 1.0, 1e-6, 200);
        assert!((x - 0.37).abs() < 1e-5);
        assert!((fx - 1.0).abs() < 1e-9);
    }

    #[test]
    fn brent_handles_boundary_minima() {
        let (x, _) = minimize_scalar(|w| w, 0.0, 1.0, 1e-6, 200);
        assert!(x < 1e-5);
        let (x, _) = minimize_scalar(|w| -w, 0.0, 1.0, 1e-6, 200);
        assert!(x > 1.0 - 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn xi_stays_within_its_bounds(
            a in proptest::collection::vec(-2.0f64..2.0, 3..8),
            c in proptest::collection::vec(-2.0f64..2.0, 3..8),
            kappa in 0.0f64..50.0,
        ) {
            let n = a.len().min(c.len());
            let p = pair(a[..n].to_vec(), c[..n].to_vec());
            let sol = solve_direction(&p, 0.5, kappa, DEFAULT_EPS_NUM).unwrap();
            if let Some(xi) = sol.xi {
                let lo = 1.0 / (1.0 + sol.lambda()).sqrt();
                prop_assert!(xi >= lo - 1e-9, "xi {xi} below {lo}");
                prop_assert!(xi <= 1.0 + 1e-9, "xi {xi} above 1");
            }
        }

        #[test]
        fn constraint_is_active_outside_fallback(
            a in proptest::collection::vec(-2.0f64..2.0, 4..8),
            c in proptest::collection::vec(-2.0f64..2.0, 4..8),
            kappa in 0.0f64..20.0,
        ) {
            let n = a.len().min(c.len());
            let p = pair(a[..n].to_vec(), c[..n].to_vec());
            let sol = solve_direction(&p, 0.5, kappa, DEFAULT_EPS_NUM).unwrap();
            if !sol.fallback {
                let diff: Vec<f64> = sol.direction.iter().zip(&p.attack).map(|(&d, &av)| d - av).collect();
                let m_norm = m_norm_sq(&sol.metric, &diff).sqrt();
                prop_assert!((m_norm - sol.rho).abs() < 1e-6, "||d-a||_M {} vs rho {}", m_norm, sol.rho);
            }
        }

        #[test]
        fn solution_is_scale_covariant(
            a in proptest::collection::vec(-2.0f64..2.0, 4..8),
            c in proptest::collection::vec(-2.0f64..2.0, 4..8),
            t in 0.1f64..10.0,
        ) {
            let n = a.len().min(c.len());
            let p = pair(a[..n].to_vec(), c[..n].to_vec());
            let ps = pair(
                p.attack.iter().map(|v| v * t).collect(),
                p.stealth.iter().map(|v| v * t).collect(),
            );
            let s1 = solve_direction(&p, 0.5, 10.0, DEFAULT_EPS_NUM).unwrap();
            let s2 = solve_direction(&ps, 0.5, 10.0, DEFAULT_EPS_NUM).unwrap();
            if !s1.fallback && !s2.fallback {
                prop_assert!((s1.w_star - s2.w_star).abs() < 1e-4);
                for (d1, d2) in s1.direction.iter().zip(&s2.direction) {
                    prop_assert!((d1 * t - d2).abs() < 1e-7 * (1.0 + d2.abs()), "{} vs {}", d1 * t, d2);
                }
            }
        }

        #[test]
        fn phi_is_convex_on_samples(
            a in proptest::collection::vec(-2.0f64..2.0, 4..8),
            c in proptest::collection::vec(-2.0f64..2.0, 4..8),
            w1 in 0.0f64..1.0,
            w2 in 0.0f64..1.0,
            t in 0.0f64..1.0,
            kappa in 0.0f64..20.0,
        ) {
            let n = a.len().min(c.len());
            let p = pair(a[..n].to_vec(), c[..n].to_vec());
            let metric = build_metric(&p, kappa, DEFAULT_EPS_NUM).unwrap();
            let rho = 0.5 * l2_norm(&p.attack);
            let phi = |w: f64| {
                let g: Vec<f64> = p.attack.iter().zip(&p.stealth).map(|(&av, &cv)| w * av + (1.0 - w) * cv).collect();
                let minv_g = minv_apply(&metric, &g);
                dot(&p.attack, &g) + rho * dot(&g, &minv_g).max(0.0).sqrt()
            };
            let mid = t * w1 + (1.0 - t) * w2;
            prop_assert!(phi(mid) <= t * phi(w1) + (1.0 - t) * phi(w2) + 1e-9);
        }
    }
}
