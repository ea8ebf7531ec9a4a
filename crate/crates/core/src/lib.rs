//! Constructive null controls for the one-dimensional semilinear heat
//! equation
//!
//! ```text
//! ∂ₜy − ∂ₓₓy + g(y) = f·1_ω  in (0,1)×(0,T),   y = 0 on x ∈ {0,1},
//! y(·,0) = u₀,  y(·,T) = 0
//! ```
//!
//! computed by a weighted least-squares functional minimized with a damped
//! Newton iteration. Each Newton direction is the minimal-cost null control
//! of a linearized problem, obtained from a Carleman-weighted variational
//! formulation posed on a space-time finite element space.
//!
//! Module map:
//! - [`grid`]: meshes, Hermite×P1 fields, quadrature, weighted norms.
//! - [`weights`]: the Carleman weight family and its identities.
//! - [`nonlinearity`]: catalog and user-defined `g`, growth and Hölder data.
//! - [`linear_control`]: the weighted linear null-control solver.
//! - [`forward`]: an independent time stepper that checks what a control does.
//! - [`leastsquares`]: the damped Newton least-squares iteration.
//! - [`baselines`]: Picard, undamped Newton and fixed-point competitors.
//! - [`diagnostics`]: order estimates, constant fits, refinement studies.
//! - [`scenario`]: serializable run descriptions and artifact writers.

pub mod baselines;
pub mod diagnostics;
pub mod expr;
pub mod forward;
pub mod grid;
pub mod leastsquares;
pub mod linalg;
pub mod linear_control;
pub mod nonlinearity;
pub mod scenario;
pub mod weights;

pub use grid::{make_grid, Field, Interval, PointField, Region, SpaceTimeGrid};
pub use weights::{WeightParams, WeightProfile, WeightSet};

/// Thread-parallel helpers with order-preserving collection, so reductions
/// done on the collected values are reproducible regardless of threading.
pub mod par {
    use std::sync::atomic::{AtomicBool, Ordering};

    static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

    /// Forces every parallel loop of the crate onto the calling thread.
    pub fn set_deterministic(on: bool) {
        SEQUENTIAL.store(on, Ordering::SeqCst);
    }

    pub fn is_deterministic() -> bool {
        SEQUENTIAL.load(Ordering::SeqCst)
    }

    /// `(0..n).map(f).collect()`, possibly in parallel.
    pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            if !is_deterministic() && n > 1 {
                use rayon::prelude::*;
                return (0..n).into_par_iter().map(f).collect();
            }
        }
        (0..n).map(f).collect()
    }
}

/// Wall clock that reads zero on `wasm32`, where `std::time::Instant` panics.
pub mod clock {
    #[derive(Debug, Clone, Copy)]
    pub struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

    impl Clock {
        pub fn start() -> Self {
            Self(
                #[cfg(not(target_arch = "wasm32"))]
                std::time::Instant::now(),
            )
        }

        pub fn seconds(&self) -> f64 {
            #[cfg(not(target_arch = "wasm32"))]
            return self.0.elapsed().as_secs_f64();
            #[cfg(target_arch = "wasm32")]
            0.0
        }
    }
}
