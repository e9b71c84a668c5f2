//! Dialog corpus: schema, taxonomy, synthetic generation and linearization.

pub mod delex;
pub mod io;
pub mod linearize;
pub mod synth;
pub mod taxonomy;
mod types;

pub use linearize::{linearize_turn, TargetKind, TrainingSample};
pub use taxonomy::{ActType, Domain, Slot};
pub use types::*;

/// Train / validation / test partition of a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<DialogSession>,
    pub valid: Vec<DialogSession>,
    pub test: Vec<DialogSession>,
}

impl Splits {
    /// Contiguous split by session order: the first `train_frac` go to train, the
    /// next `valid_frac` to validation, the rest to test.
    pub fn by_fraction(sessions: Vec<DialogSession>, train_frac: f64, valid_frac: f64) -> Self {
        let n = sessions.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_valid = (((n as f64) * valid_frac).round() as usize).min(n - n_train.min(n));
        let mut it = sessions.into_iter();
        let train: Vec<_> = it.by_ref().take(n_train).collect();
        let valid: Vec<_> = it.by_ref().take(n_valid).collect();
        Splits {
            train,
            valid,
            test: it.collect(),
        }
    }
}

/// Linearizes every turn of every session.
pub fn linearize_all(sessions: &[DialogSession], kind: TargetKind) -> Vec<TrainingSample> {
    sessions
        .iter()
        .flat_map(|s| (0..s.turns.len()).map(move |t| linearize_turn(s, t, kind).expect("turn index in range")))
        .collect()
}
