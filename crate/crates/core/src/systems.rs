use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::BoxBounds;

use std::f64::consts::PI;

/// Default per-dimension standard deviation of the process noise.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

#[derive(Clone, Debug)]
struct PendulumParams {
    mass: f64,
    length: f64,
    gravity: f64,
    damping: f64,
}

#[derive(Clone, Debug)]
struct CartPoleParams {
    cart_mass: f64,
    pole_mass: f64,
    half_length: f64,
    gravity: f64,
    /// Second input channel: a torque at the pole pivot. Without it the
    /// system is the classic force-only cart-pole.
    pole_torque: bool,
}

#[derive(Clone, Debug)]
enum Dynamics {
    Toy,
    Surface { amplitude: f64 },
    Pendulum(PendulumParams),
    CartPole(CartPoleParams),
}

/// A benchmark system `x+ = f(x, u) + g(x, u) + w` under Euler discretization:
/// `f` is the prior the learner is given for free, `g` the part it must learn,
/// and `w` zero-mean Gaussian process noise, independent per dimension.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    name: &'static str,
    d_x: usize,
    d_u: usize,
    dt: f64,
    input_bounds: BoxBounds,
    region_bounds: BoxBounds,
    noise_std: DVector<f64>,
    dynamics: Dynamics,
}

pub const SYSTEM_NAMES: [&str; 4] = ["toy", "surface", "pendulum", "cartpole"];

/// Look up a benchmark system by name. `None` for unknown names; callers
/// surfacing this to users should list [`SYSTEM_NAMES`].
pub fn by_name(name: &str) -> Option<SystemSpec> {
    match name {
        "toy" => Some(make_toy()),
        "surface" => Some(make_surface()),
        "pendulum" => Some(make_pendulum()),
        "cartpole" => Some(make_cartpole()),
        _ => None,
    }
}

/// Scalar system `dx/dt = 10 (sin x + arctan x + u)` with a trivial prior
/// `f(x, u) = x`; everything that moves the state must be learned.
pub fn make_toy() -> SystemSpec {
    SystemSpec {
        name: "toy",
        d_x: 1,
        d_u: 1,
        dt: 0.1,
        input_bounds: BoxBounds::new(vec![-5.0], vec![5.0]).unwrap(),
        region_bounds: BoxBounds::new(vec![-PI, -1.0], vec![PI, 1.0]).unwrap(),
        noise_std: DVector::from_element(1, DEFAULT_NOISE_STD),
        dynamics: Dynamics::Toy,
    }
}

/// Two-dimensional vector field with cross-coupled trigonometric drift; the
/// prior already knows the actuation gain, `f(x, u) = x + 3 dt u`.
pub fn make_surface() -> SystemSpec {
    surface_with_amplitude(10.0)
}

/// Surface system with the unknown drift scaled by `amplitude`; zero leaves
/// nothing to learn, which several tests rely on.
pub(crate) fn surface_with_amplitude(amplitude: f64) -> SystemSpec {
    let q = PI / 4.0;
    SystemSpec {
        name: "surface",
        d_x: 2,
        d_u: 2,
        dt: 0.02,
        input_bounds: BoxBounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        region_bounds: BoxBounds::new(vec![-q, -q, -1.0, -1.0], vec![q, q, 1.0, 1.0]).unwrap(),
        noise_std: DVector::from_element(2, DEFAULT_NOISE_STD),
        dynamics: Dynamics::Surface { amplitude },
    }
}

/// Torque-actuated pendulum, angle measured from the upward position. The
/// region of interest sits around the hanging position (angle pi).
pub fn make_pendulum() -> SystemSpec {
    SystemSpec {
        name: "pendulum",
        d_x: 2,
        d_u: 1,
        dt: 0.05,
        input_bounds: BoxBounds::new(vec![-10.0], vec![10.0]).unwrap(),
        region_bounds: BoxBounds::new(
            vec![PI / 2.0, -5.0, -3.0],
            vec![3.0 * PI / 2.0, 5.0, 3.0],
        )
        .unwrap(),
        noise_std: DVector::from_element(2, DEFAULT_NOISE_STD),
        dynamics: Dynamics::Pendulum(PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
        }),
    }
}

/// Cart-pole around the balanced upright position, cart position dropped from
/// the state: x = (cart velocity, pole angle, pole angular velocity), with a
/// cart force and a pole pivot torque as inputs.
pub fn make_cartpole() -> SystemSpec {
    cartpole_with_torque(true)
}

/// Cart-pole variant selector; `pole_torque = false` gives the classic
/// force-only single-input system.
pub fn cartpole_with_torque(pole_torque: bool) -> SystemSpec {
    let d_u = if pole_torque { 2 } else { 1 };
    let mut lo = vec![-2.0, -PI / 4.0, -5.0];
    let mut hi = vec![2.0, PI / 4.0, 5.0];
    lo.extend(std::iter::repeat_n(-5.0, d_u));
    hi.extend(std::iter::repeat_n(5.0, d_u));
    SystemSpec {
        name: "cartpole",
        d_x: 3,
        d_u,
        dt: 0.05,
        input_bounds: BoxBounds::new(vec![-5.0; d_u], vec![5.0; d_u]).unwrap(),
        region_bounds: BoxBounds::new(lo, hi).unwrap(),
        noise_std: DVector::from_element(3, DEFAULT_NOISE_STD),
        dynamics: Dynamics::CartPole(CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            pole_torque,
        }),
    }
}

impl SystemSpec {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    /// Joint state-input dimension.
    pub fn d(&self) -> usize {
        self.d_x + self.d_u
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn input_bounds(&self) -> &BoxBounds {
        &self.input_bounds
    }

    /// Default region-of-interest box over (x, u).
    pub fn region_bounds(&self) -> &BoxBounds {
        &self.region_bounds
    }

    pub fn noise_std(&self) -> &DVector<f64> {
        &self.noise_std
    }

    /// Same system with every noise standard deviation replaced.
    pub fn with_noise_std(mut self, std: f64) -> Result<Self> {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise std must be finite and >= 0, got {std}"
            )));
        }
        self.noise_std = DVector::from_element(self.d_x, std);
        Ok(self)
    }

    fn check_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.d_x {
            return Err(Error::DimensionMismatch {
                context: "system state",
                expected: self.d_x,
                got: x.len(),
            });
        }
        if u.len() != self.d_u {
            return Err(Error::DimensionMismatch {
                context: "system input",
                expected: self.d_u,
                got: u.len(),
            });
        }
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite state or input".into()));
        }
        Ok(())
    }

    /// Continuous-time drift dx/dt.
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.dynamics {
            Dynamics::Toy => {
                DVector::from_vec(vec![10.0 * (x[0].sin() + x[0].atan() + u[0])])
            }
            Dynamics::Surface { amplitude } => DVector::from_vec(vec![
                3.0 * u[0] + amplitude * (5.0 * x[0]).cos() * (5.0 * x[1]).cos(),
                3.0 * u[1] + amplitude * (5.0 * x[0]).sin() * (5.0 * x[1]).sin(),
            ]),
            Dynamics::Pendulum(p) => {
                let (theta, omega) = (x[0], x[1]);
                let ml2 = p.mass * p.length * p.length;
                let acc = p.gravity / p.length * theta.sin() - p.damping / ml2 * omega
                    + u[0] / ml2;
                DVector::from_vec(vec![omega, acc])
            }
            Dynamics::CartPole(p) => {
                let (theta, omega) = (x[1], x[2]);
                let force = u[0];
                let torque = if p.pole_torque { u[1] } else { 0.0 };
                let total = p.cart_mass + p.pole_mass;
                let pm_l = p.pole_mass * p.half_length;
                let (sin_t, cos_t) = theta.sin_cos();
                let temp = (force + pm_l * omega * omega * sin_t) / total;
                // Pole torque balance about the pivot, divided by m_p * l.
                let num = p.gravity * sin_t - cos_t * temp + torque / pm_l;
                let denom = p.half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total);
                let omega_dot = num / denom;
                let v_dot = temp - pm_l * omega_dot * cos_t / total;
                DVector::from_vec(vec![v_dot, omega, omega_dot])
            }
        }
    }

    /// The prior mean dynamics the learner is handed for free.
    pub fn known_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        Ok(match &self.dynamics {
            Dynamics::Surface { .. } => x + 3.0 * self.dt * u,
            _ => x.clone(),
        })
    }

    /// Ground-truth residual: the noiseless Euler step minus the prior.
    /// Experiments may only query this for simulation and scoring.
    pub fn true_g(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        let next = x + self.dt * self.drift(x, u);
        Ok(next - self.known_f(x, u)?)
    }

    /// One noisy simulation step. The input must respect the input bounds.
    pub fn step<R: Rng>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        if !self.input_bounds.contains(u, 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "input {u:?} outside the input bounds"
            )));
        }
        let mut next = self.known_f(x, u)? + self.true_g(x, u)?;
        for i in 0..self.d_x {
            if self.noise_std[i] > 0.0 {
                let n = Normal::new(0.0, self.noise_std[i])
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                next[i] += n.sample(rng);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutDivergence { step: 0 });
        }
        Ok(next)
    }
}
