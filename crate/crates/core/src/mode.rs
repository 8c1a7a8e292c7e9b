use rand_chacha::ChaCha8Rng;

/// Whether a forward pass is a training pass (dropout active) or not.
pub enum Mode<'r> {
    Eval,
    Train {
        emb_dropout: f64,
        rnn_dropout: f64,
        rng: &'r mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}
