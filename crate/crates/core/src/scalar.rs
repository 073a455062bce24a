//! Floating point types the kernels can run in.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::sync::{Arc, Mutex, OnceLock};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftNum, FftPlanner};

/// Arithmetic precision selectable at the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

type PlanCache<T> = Mutex<(FftPlanner<T>, HashMap<(usize, bool), Arc<dyn Fft<T>>>)>;

/// Reusable buffers for the channel-major copies made by the FFT product.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    pub(crate) taps: Vec<T>,
    pub(crate) input: Vec<T>,
    pub(crate) output: Vec<T>,
}

/// A real scalar usable by the Toeplitz kernels.
pub trait Real: FftNum + Float + FromPrimitive + ToPrimitive + Debug + Display + Default {
    /// Tolerance the FFT path is held to against the direct product.
    const ORACLE_TOL: f64;

    #[doc(hidden)]
    fn plan_cache() -> &'static PlanCache<Self>;

    #[doc(hidden)]
    fn real_planner() -> &'static Mutex<RealFftPlanner<Self>>;

    #[doc(hidden)]
    fn workspace() -> &'static std::thread::LocalKey<RefCell<Workspace<Self>>>;

    /// Runs `f` with this thread's scratch buffers, or fresh ones if they are
    /// already in use further up the stack.
    fn with_workspace<R>(f: impl FnOnce(&mut Workspace<Self>) -> R) -> R {
        Self::workspace().with(|cell| match cell.try_borrow_mut() {
            Ok(mut ws) => f(&mut ws),
            Err(_) => f(&mut Workspace::default()),
        })
    }

    /// Returns a cached forward or inverse plan of the given size.
    fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>> {
        let mut guard = Self::plan_cache().lock().expect("fft plan cache poisoned");
        let (planner, plans) = &mut *guard;
        plans
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    }

    /// Cached real-to-complex plan of the given size.
    fn real_forward(len: usize) -> Arc<dyn RealToComplex<Self>> {
        Self::real_planner().lock().expect("fft plan cache poisoned").plan_fft_forward(len)
    }

    /// Cached complex-to-real plan of the given size.
    fn real_inverse(len: usize) -> Arc<dyn ComplexToReal<Self>> {
        Self::real_planner().lock().expect("fft plan cache poisoned").plan_fft_inverse(len)
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f64 {
    const ORACLE_TOL: f64 = 1e-9;

    fn plan_cache() -> &'static PlanCache<Self> {
        static CACHE: OnceLock<PlanCache<f64>> = OnceLock::new();
        CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())))
    }

    fn real_planner() -> &'static Mutex<RealFftPlanner<f64>> {
        static PLANNER: OnceLock<Mutex<RealFftPlanner<f64>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(RealFftPlanner::new()))
    }

    fn workspace() -> &'static std::thread::LocalKey<RefCell<Workspace<f64>>> {
        thread_local!(static WS: RefCell<Workspace<f64>> = RefCell::new(Workspace::default()));
        &WS
    }
}

impl Real for f32 {
    const ORACLE_TOL: f64 = 1e-4;

    fn plan_cache() -> &'static PlanCache<Self> {
        static CACHE: OnceLock<PlanCache<f32>> = OnceLock::new();
        CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())))
    }

    fn real_planner() -> &'static Mutex<RealFftPlanner<f32>> {
        static PLANNER: OnceLock<Mutex<RealFftPlanner<f32>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(RealFftPlanner::new()))
    }

    fn workspace() -> &'static std::thread::LocalKey<RefCell<Workspace<f32>>> {
        thread_local!(static WS: RefCell<Workspace<f32>> = RefCell::new(Workspace::default()));
        &WS
    }
}
