//! Process-wide fault injection used to show that `verify` detects broken
//! gradients. Nothing enables a mutation unless asked to explicitly.

use std::sync::atomic::{AtomicBool, Ordering};

static QUAD_PENALTY_SIGN: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the gradient returned by the quadratic penalty.
    QuadPenaltySign,
}

impl std::str::FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quad-penalty-sign" => Ok(Mutation::QuadPenaltySign),
            other => Err(format!("unknown mutation {other:?}")),
        }
    }
}

pub fn enable(m: Mutation) {
    match m {
        Mutation::QuadPenaltySign => QUAD_PENALTY_SIGN.store(true, Ordering::SeqCst),
    }
}

pub(crate) fn quad_penalty_sign() -> f64 {
    if QUAD_PENALTY_SIGN.load(Ordering::Relaxed) {
        -1.0
    } else {
        1.0
    }
}
