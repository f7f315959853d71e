//! Planar two-link arm with equal link lengths.
//!
//! The arm doubles as the simulated environment driven by the robot client and
//! as the scripted demonstrator that produces training episodes. Everything in
//! here is a pure function over value types.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use thiserror::Error;

/// Singular values below this switch the pseudo-inverse to its damped form.
pub const SINGULAR_FLOOR: f64 = 1e-4;
/// Tikhonov damping used once the Jacobian is near-singular.
pub const DAMPING: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("target ({x:.4}, {y:.4}) lies outside the reachable disc of radius {radius:.4}")]
    Unreachable { x: f64, y: f64, radius: f64 },
    #[error("inverse kinematics did not converge, final residual {residual:e}")]
    NotConverged { residual: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

impl JointLimit {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "joint limit lower bound above upper bound");
        Self { lo, hi }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Default limits: shoulder constrained to the upper half-plane (arm mounted on
/// a surface), elbow free over a full turn.
pub fn default_limits() -> [JointLimit; 2] {
    [JointLimit::new(0.0, PI), JointLimit::new(-PI, PI)]
}

/// Joint configuration of the arm together with its geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmState {
    theta: Vector2<f64>,
    link_len: f64,
    limits: [JointLimit; 2],
}

impl ArmState {
    /// Builds a state with default limits. The configuration is clamped into them.
    pub fn new(theta1: f64, theta2: f64, link_len: f64) -> Result<Self, KinematicsError> {
        Self::with_limits(theta1, theta2, link_len, default_limits())
    }

    pub fn with_limits(
        theta1: f64,
        theta2: f64,
        link_len: f64,
        limits: [JointLimit; 2],
    ) -> Result<Self, KinematicsError> {
        if !(link_len > 0.0 && link_len.is_finite()) {
            return Err(KinematicsError::InvalidArgument(format!(
                "link length must be positive, got {link_len}"
            )));
        }
        if !(theta1.is_finite() && theta2.is_finite()) {
            return Err(KinematicsError::InvalidArgument(
                "joint angles must be finite".into(),
            ));
        }
        let mut state = Self {
            theta: Vector2::new(theta1, theta2),
            link_len,
            limits,
        };
        state.clamp_in_place();
        Ok(state)
    }

    pub fn theta(&self) -> [f64; 2] {
        [self.theta[0], self.theta[1]]
    }

    pub fn link_len(&self) -> f64 {
        self.link_len
    }

    pub fn limits(&self) -> [JointLimit; 2] {
        self.limits
    }

    /// Radius of the reachable disc.
    pub fn reach(&self) -> f64 {
        2.0 * self.link_len
    }

    /// Same geometry, new configuration (clamped).
    pub fn with_theta(&self, theta: [f64; 2]) -> Self {
        let mut next = *self;
        next.theta = Vector2::new(theta[0], theta[1]);
        next.clamp_in_place();
        next
    }

    /// Returns true when the configuration had to be clamped.
    fn clamp_in_place(&mut self) -> bool {
        let mut clamped = false;
        for i in 0..2 {
            let c = self.limits[i].clamp(self.theta[i]);
            if c != self.theta[i] {
                clamped = true;
                self.theta[i] = c;
            }
        }
        clamped
    }

    fn theta_vec(&self) -> Vector2<f64> {
        self.theta
    }
}

/// Desired end-effector position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub p_star: [f64; 2],
    pub p_dot_star: [f64; 2],
}

impl PoseTarget {
    pub fn fixed(x: f64, y: f64) -> Self {
        Self {
            p_star: [x, y],
            p_dot_star: [0.0, 0.0],
        }
    }

    pub fn check_reachable(&self, link_len: f64) -> Result<(), KinematicsError> {
        let radius = 2.0 * link_len;
        let norm = Vector2::from(self.p_star).norm();
        if norm > radius * (1.0 + 1e-12) {
            return Err(KinematicsError::Unreachable {
                x: self.p_star[0],
                y: self.p_star[1],
                radius,
            });
        }
        Ok(())
    }
}

/// End-effector position.
pub fn fk(state: &ArmState) -> [f64; 2] {
    let v = fk_vec(state.link_len, &state.theta);
    [v[0], v[1]]
}

fn fk_vec(l: f64, q: &Vector2<f64>) -> Vector2<f64> {
    let (t1, t12) = (q[0], q[0] + q[1]);
    Vector2::new(l * t1.cos() + l * t12.cos(), l * t1.sin() + l * t12.sin())
}

/// Analytic Jacobian of [`fk`] with respect to the joint angles.
pub fn jacobian(state: &ArmState) -> [[f64; 2]; 2] {
    let j = jacobian_mat(state.link_len, &state.theta);
    [[j[(0, 0)], j[(0, 1)]], [j[(1, 0)], j[(1, 1)]]]
}

fn jacobian_mat(l: f64, q: &Vector2<f64>) -> Matrix2<f64> {
    let (t1, t12) = (q[0], q[0] + q[1]);
    Matrix2::new(
        -l * t1.sin() - l * t12.sin(),
        -l * t12.sin(),
        l * t1.cos() + l * t12.cos(),
        l * t12.cos(),
    )
}

/// Pseudo-inverse of a 2x2 matrix through its SVD. Returns the inverse and
/// whether the damped branch was taken.
pub(crate) fn pseudo_inverse(j: &Matrix2<f64>) -> (Matrix2<f64>, bool) {
    let svd = j.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sigma_min = svd.singular_values.min();
    let damped = sigma_min < SINGULAR_FLOOR;
    let inv_sigma = svd.singular_values.map(|s| {
        if damped {
            s / (s * s + DAMPING)
        } else {
            1.0 / s
        }
    });
    (v_t.transpose() * Matrix2::from_diagonal(&inv_sigma) * u.transpose(), damped)
}

/// Result of one differential-IK integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: ArmState,
    /// Joint velocity that was integrated.
    pub q_dot: [f64; 2],
    /// The Jacobian was near-singular and the damped pseudo-inverse was used.
    pub damped: bool,
    /// The integrated configuration hit a joint limit.
    pub clamped: bool,
}

/// One forward-Euler step of joint velocities solved from a desired
/// end-effector velocity.
pub fn diffik_step(
    state: &ArmState,
    p_dot_star: [f64; 2],
    dt: f64,
) -> Result<StepOutcome, KinematicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(KinematicsError::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let j = jacobian_mat(state.link_len, &state.theta);
    let (j_pinv, damped) = pseudo_inverse(&j);
    let q_dot = j_pinv * Vector2::from(p_dot_star);
    let mut next = *state;
    next.theta = state.theta + dt * q_dot;
    let clamped = next.clamp_in_place();
    Ok(StepOutcome {
        state: next,
        q_dot: [q_dot[0], q_dot[1]],
        damped,
        clamped,
    })
}

/// Differential IK with proportional feedback on the end-effector position error.
pub fn feedback_diffik_step(
    state: &ArmState,
    target: &PoseTarget,
    k_p: f64,
    dt: f64,
) -> Result<StepOutcome, KinematicsError> {
    if !(k_p >= 0.0 && k_p.is_finite()) {
        return Err(KinematicsError::InvalidArgument(format!(
            "gain must be non-negative, got {k_p}"
        )));
    }
    let p = fk_vec(state.link_len, &state.theta);
    let err = Vector2::from(target.p_star) - p;
    let cmd = Vector2::from(target.p_dot_star) + k_p * err;
    diffik_step(state, [cmd[0], cmd[1]], dt)
}

/// Mirror configuration reaching the same end-effector position.
fn mirror(q: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(q[0] + q[1], -q[1])
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Damped Gauss-Newton on the position residual with a backtracking line search.
fn gauss_newton(
    target: &Vector2<f64>,
    init: &ArmState,
    max_iters: usize,
    tol: f64,
) -> (ArmState, f64) {
    let l = init.link_len;
    let mut state = *init;
    let mut r = fk_vec(l, &state.theta) - target;
    let mut res = r.norm();
    for _ in 0..max_iters {
        if res <= tol {
            break;
        }
        let (j_pinv, _) = pseudo_inverse(&jacobian_mat(l, &state.theta));
        let step = -(j_pinv * r);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let mut trial = state;
            trial.theta = state.theta + alpha * step;
            trial.clamp_in_place();
            let r_trial = fk_vec(l, &trial.theta) - target;
            let res_trial = r_trial.norm();
            if res_trial < res {
                state = trial;
                r = r_trial;
                res = res_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (state, res)
}

/// Solves for a configuration placing the end effector at `target.p_star`.
///
/// Starts from `init`; if that stalls (joint limits, singular start) it restarts
/// from a fixed set of seeds. Of the two mirror solutions the one nearest `init`
/// in joint space is returned.
pub fn ik_solve(
    target: &PoseTarget,
    init: &ArmState,
    max_iters: usize,
    tol: f64,
) -> Result<ArmState, KinematicsError> {
    target.check_reachable(init.link_len)?;
    if !(tol > 0.0) {
        return Err(KinematicsError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let p = Vector2::from(target.p_star);
    let seeds = std::iter::once(init.theta_vec()).chain(
        [
            (PI / 2.0, PI / 2.0),
            (PI / 2.0, -PI / 2.0),
            (PI / 4.0, 1.0),
            (3.0 * PI / 4.0, -1.0),
            (0.2, -2.0),
            (PI - 0.2, 2.0),
            (PI / 2.0, 0.1),
        ]
        .into_iter()
        .map(|(a, b)| Vector2::new(a, b)),
    );

    let mut best_residual = f64::INFINITY;
    for seed in seeds {
        let mut start = *init;
        start.theta = seed;
        start.clamp_in_place();
        let (sol, res) = gauss_newton(&p, &start, max_iters, tol);
        if res <= tol {
            return Ok(nearest_mirror(sol, init, &p, tol));
        }
        best_residual = best_residual.min(res);
    }
    Err(KinematicsError::NotConverged {
        residual: best_residual,
    })
}

fn nearest_mirror(sol: ArmState, init: &ArmState, target: &Vector2<f64>, tol: f64) -> ArmState {
    let m = mirror(&sol.theta);
    let m = Vector2::new(wrap_angle(m[0]), m[1]);
    let in_limits = sol.limits[0].contains(m[0]) && sol.limits[1].contains(m[1]);
    if !in_limits {
        return sol;
    }
    let residual = (fk_vec(sol.link_len, &m) - target).norm();
    let closer = (m - init.theta).norm() < (sol.theta - init.theta).norm();
    if residual <= tol && closer {
        let mut out = sol;
        out.theta = m;
        out
    } else {
        sol
    }
}

/// One recorded step of a scripted demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    /// Configuration before the step.
    pub q: [f64; 2],
    /// End-effector position before the step.
    pub ee: [f64; 2],
    /// Noise-free configuration after the step.
    pub q_next: [f64; 2],
    /// Recorded action: `q_next` plus Gaussian noise.
    pub action: [f64; 2],
}

impl DemoStep {
    /// Observation vector `(q, fk(q))`.
    pub fn observation(&self) -> [f64; 4] {
        [self.q[0], self.q[1], self.ee[0], self.ee[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub dt: f64,
    pub k_p: f64,
    pub steps_per_waypoint: usize,
    pub noise_std: f64,
}

/// Rolls feedback differential IK through `waypoints`.
///
/// During segment `i` the reference moves as `p_star + s * p_dot_star` for the
/// elapsed segment time `s`, so a waypoint with zero velocity is a set-point and
/// a waypoint with velocity is the start of a straight moving segment.
pub fn scripted_demo<R: Rng + ?Sized>(
    start: &ArmState,
    waypoints: &[PoseTarget],
    cfg: &DemoConfig,
    rng: &mut R,
) -> Result<Vec<DemoStep>, KinematicsError> {
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(KinematicsError::InvalidArgument(format!(
            "noise std must be non-negative, got {}",
            cfg.noise_std
        )));
    }
    for w in waypoints {
        w.check_reachable(start.link_len)?;
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| KinematicsError::InvalidArgument(e.to_string()))?;
    let mut state = *start;
    let mut out = Vec::with_capacity(waypoints.len() * cfg.steps_per_waypoint);
    for w in waypoints {
        for j in 0..cfg.steps_per_waypoint {
            let s = j as f64 * cfg.dt;
            let reference = PoseTarget {
                p_star: [
                    w.p_star[0] + s * w.p_dot_star[0],
                    w.p_star[1] + s * w.p_dot_star[1],
                ],
                p_dot_star: w.p_dot_star,
            };
            let next = feedback_diffik_step(&state, &reference, cfg.k_p, cfg.dt)?.state;
            let q_next = next.theta();
            let action = if cfg.noise_std == 0.0 {
                q_next
            } else {
                [
                    q_next[0] + noise.sample(rng),
                    q_next[1] + noise.sample(rng),
                ]
            };
            out.push(DemoStep {
                q: state.theta(),
                ee: fk(&state),
                q_next,
                action,
            });
            state = next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arm(t1: f64, t2: f64) -> ArmState {
        ArmState::with_limits(
            t1,
            t2,
            1.0,
            [JointLimit::new(-PI, PI), JointLimit::new(-PI, PI)],
        )
        .unwrap()
    }

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn fk_known_configurations() {
        assert!(close(fk(&arm(0.0, 0.0)), [2.0, 0.0], 1e-15));
        assert!(close(fk(&arm(PI / 2.0, 0.0)), [0.0, 2.0], 1e-15));
        assert!(close(fk(&arm(PI / 2.0, -PI / 2.0)), [1.0, 1.0], 1e-15));
    }

    #[test]
    fn jacobian_known_configurations() {
        let j = jacobian(&arm(0.0, 0.0));
        assert_eq!(j, [[0.0, 0.0], [2.0, 1.0]]);
        let j = jacobian(&arm(PI / 2.0, 0.0));
        let expected = [[-2.0, -1.0], [0.0, 0.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((j[r][c] - expected[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let s = arm(0.3, 0.7);
        let j = jacobian(&s);
        let h = 1e-6;
        for c in 0..2 {
            let mut plus = s.theta();
            let mut minus = s.theta();
            plus[c] += h;
            minus[c] -= h;
            let (fp, fm) = (fk(&s.with_theta(plus)), fk(&s.with_theta(minus)));
            for r in 0..2 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - j[r][c]).abs() < 1e-5, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn ik_boundary_target() {
        let init = ArmState::new(0.1, 0.1, 1.0).unwrap();
        let sol = ik_solve(&PoseTarget::fixed(2.0, 0.0), &init, 200, 1e-6).unwrap();
        let p = fk(&sol);
        assert!(((p[0] - 2.0).powi(2) + p[1].powi(2)).sqrt() <= 1e-6);
        assert!(sol.theta()[0].abs() < 2e-3 && sol.theta()[1].abs() < 4e-3);
    }

    #[test]
    fn ik_interior_target_either_mirror() {
        let init = ArmState::new(1.2, -1.2, 1.0).unwrap();
        let sol = ik_solve(&PoseTarget::fixed(1.0, 1.0), &init, 100, 1e-9).unwrap();
        let p = fk(&sol);
        assert!(close(p, [1.0, 1.0], 1e-9));
        // Nearest of (pi/2, -pi/2) and (0, pi/2) to the init.
        assert!(close(sol.theta(), [PI / 2.0, -PI / 2.0], 1e-6));
    }

    #[test]
    fn ik_unreachable() {
        let init = ArmState::new(0.5, 0.5, 1.0).unwrap();
        let err = ik_solve(&PoseTarget::fixed(3.0, 0.0), &init, 100, 1e-6).unwrap_err();
        assert!(matches!(err, KinematicsError::Unreachable { .. }));
    }

    #[test]
    fn diffik_zero_velocity_is_identity() {
        let s = arm(0.4, 0.9);
        let out = diffik_step(&s, [0.0, 0.0], 0.01).unwrap();
        assert_eq!(out.state, s);
        assert!(!out.damped);
    }

    #[test]
    fn diffik_rejects_bad_dt() {
        assert!(diffik_step(&arm(0.4, 0.9), [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn diffik_local_error_is_second_order() {
        let s = arm(PI / 4.0, PI / 2.0);
        let v = [1e-2, 0.0];
        let local_err = |dt: f64| {
            let next = diffik_step(&s, v, dt).unwrap().state;
            let p0 = fk(&s);
            let p1 = fk(&next);
            ((p1[0] - p0[0] - dt * v[0]).powi(2) + (p1[1] - p0[1] - dt * v[1]).powi(2)).sqrt()
        };
        let e1 = local_err(0.1);
        let e2 = local_err(0.05);
        let order = (e1 / e2).log2();
        assert!(order >= 1.9, "observed order {order}");
    }

    #[test]
    fn diffik_singular_configuration_is_damped_and_bounded() {
        let s = arm(0.0, 0.0);
        let out = diffik_step(&s, [1.0, 0.0], 0.01).unwrap();
        assert!(out.damped);
        let qn = (out.q_dot[0].powi(2) + out.q_dot[1].powi(2)).sqrt();
        // Largest gain of s / (s^2 + lambda) is 1 / (2 sqrt(lambda)).
        assert!(qn <= 1.0 / (2.0 * DAMPING.sqrt()));
        assert!(out.state.theta().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feedback_fixed_point_and_zero_gain() {
        let s = arm(0.6, 0.8);
        let p = fk(&s);
        let out = feedback_diffik_step(&s, &PoseTarget::fixed(p[0], p[1]), 3.0, 0.01).unwrap();
        assert_eq!(out.state, s);

        let target = PoseTarget {
            p_star: [0.2, 1.5],
            p_dot_star: [0.05, -0.02],
        };
        let a = feedback_diffik_step(&s, &target, 0.0, 0.01).unwrap();
        let b = diffik_step(&s, target.p_dot_star, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feedback_tracking_error_decreases() {
        let goal = arm(0.9, 0.6);
        let p = fk(&goal);
        let target = PoseTarget::fixed(p[0], p[1]);
        let mut s = arm(0.95, 0.55);
        let err = |s: &ArmState| {
            let q = fk(s);
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
        };
        let mut prev = err(&s);
        for _ in 0..100 {
            s = feedback_diffik_step(&s, &target, 2.0, 0.01).unwrap().state;
            let e = err(&s);
            assert!(e < prev, "error went from {prev} to {e}");
            prev = e;
        }
    }

    #[test]
    fn joint_limits_clamp() {
        let s = ArmState::new(-0.5, 4.0, 1.0).unwrap();
        assert_eq!(s.theta(), [0.0, PI]);
        assert!(ArmState::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn demo_without_noise_records_next_configuration() {
        let start = ArmState::new(0.8, 0.7, 1.0).unwrap();
        let cfg = DemoConfig {
            dt: 0.01,
            k_p: 2.0,
            steps_per_waypoint: 20,
            noise_std: 0.0,
        };
        let wps = [
            PoseTarget::fixed(0.5, 1.2),
            PoseTarget {
                p_star: [0.5, 1.2],
                p_dot_star: [0.1, 0.0],
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = scripted_demo(&start, &wps, &cfg, &mut rng).unwrap();
        assert_eq!(steps.len(), 40);
        for w in steps.windows(2) {
            assert_eq!(w[0].action, w[0].q_next);
            assert_eq!(w[0].q_next, w[1].q);
        }
    }

    #[test]
    fn demo_single_waypoint_at_start_is_constant() {
        let start = ArmState::new(0.8, 0.7, 1.0).unwrap();
        let p = fk(&start);
        let cfg = DemoConfig {
            dt: 0.02,
            k_p: 1.0,
            steps_per_waypoint: 25,
            noise_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let steps = scripted_demo(&start, &[PoseTarget::fixed(p[0], p[1])], &cfg, &mut rng).unwrap();
        assert!(steps.iter().all(|s| s.q == start.theta() && s.action == start.theta()));
    }

    #[test]
    fn demo_noise_has_half_normal_magnitude() {
        let start = ArmState::new(0.8, 0.7, 1.0).unwrap();
        let p = fk(&start);
        let cfg = DemoConfig {
            dt: 0.02,
            k_p: 1.0,
            steps_per_waypoint: 6000,
            noise_std: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let steps = scripted_demo(&start, &[PoseTarget::fixed(p[0], p[1])], &cfg, &mut rng).unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &steps {
            for i in 0..2 {
                sum += (s.action[i] - s.q_next[i]).abs();
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let expected = 0.01 * (2.0 / PI).sqrt();
        assert!((mean - expected).abs() <= 0.1 * expected, "mean {mean}");
    }

    #[test]
    fn demo_rejects_unreachable_waypoint() {
        let start = ArmState::new(0.8, 0.7, 1.0).unwrap();
        let cfg = DemoConfig {
            dt: 0.02,
            k_p: 1.0,
            steps_per_waypoint: 5,
            noise_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = scripted_demo(&start, &[PoseTarget::fixed(2.5, 0.0)], &cfg, &mut rng);
        assert!(matches!(err, Err(KinematicsError::Unreachable { .. })));
    }
}
