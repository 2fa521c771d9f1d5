use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD;

/// One `[batch, seq]` block of next-token training data. Targets are the
/// inputs shifted left by one; `mask` is false exactly on pad targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    /// Packs tokenised sequences (each `[bos, .., eos]`) into a batch of
    /// width `seq_len`, truncating longer sequences.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>, seq_len: usize) -> Batch {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut batch = 0;
        for s in seqs {
            batch += 1;
            for t in 0..seq_len {
                inputs.push(s.get(t).copied().filter(|_| t + 1 < s.len()).unwrap_or(PAD));
                targets.push(s.get(t + 1).copied().unwrap_or(PAD));
            }
        }
        let mask = targets.iter().map(|&t| t != PAD).collect();
        Batch {
            batch,
            seq: seq_len,
            inputs,
            targets,
            mask,
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.seq..(b + 1) * self.seq]
    }
}

/// Snapshot of a [`BatchStream`] sufficient to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    /// RNG word position at the start of the current epoch (before its
    /// shuffle).
    pub epoch_word_pos: u128,
    pub cursor: usize,
    pub epoch: u64,
}

/// Endless stream of full batches. Each epoch visits every sequence once in
/// an order shuffled from the seeded RNG; batches may straddle epochs, so
/// every batch has exactly `batch_size` rows.
pub struct BatchStream<'a> {
    sequences: &'a [Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    epoch_word_pos: u128,
}

pub fn batch_iter(
    sequences: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> BatchStream<'_> {
    assert!(!sequences.is_empty(), "batch_iter over an empty corpus");
    let mut stream = BatchStream {
        sequences,
        batch_size,
        seq_len,
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
        epoch_word_pos: 0,
    };
    stream.start_epoch();
    stream
}

impl<'a> BatchStream<'a> {
    fn start_epoch(&mut self) {
        self.epoch_word_pos = self.rng.get_word_pos();
        self.order = (0..self.sequences.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.rng.get_seed(),
            epoch_word_pos: self.epoch_word_pos,
            cursor: self.cursor,
            epoch: self.epoch,
        }
    }

    pub fn resume(
        sequences: &'a [Vec<usize>],
        batch_size: usize,
        seq_len: usize,
        state: StreamState,
    ) -> BatchStream<'a> {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_word_pos(state.epoch_word_pos);
        let mut stream = BatchStream {
            sequences,
            batch_size,
            seq_len,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: state.epoch,
            epoch_word_pos: 0,
        };
        stream.start_epoch();
        stream.cursor = state.cursor;
        stream
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.start_epoch();
            }
            rows.push(self.sequences[self.order[self.cursor]].as_slice());
            self.cursor += 1;
        }
        Some(Batch::from_sequences(rows, self.seq_len))
    }
}

/// In-order batches covering every sequence once; the last may be short.
pub fn sequential_batches(
    sequences: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
) -> impl Iterator<Item = Batch> + '_ {
    sequences
        .chunks(batch_size)
        .map(move |chunk| Batch::from_sequences(chunk.iter().map(Vec::as_slice), seq_len))
}
