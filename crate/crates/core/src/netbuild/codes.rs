//! Binary activation codes: one bitset per batch input, concatenated over
//! every captured activation tensor in the network. Hamming distances
//! between inputs feed the activation-distance metric.

use crate::autodiff::Tape;

use super::ActivationCapture;

/// Per-input binary codes packed into 64-bit words.
#[derive(Debug, Clone)]
pub struct ActivationCodes {
    n: usize,
    bits_per_input: usize,
    words_per_input: usize,
    words: Vec<u64>,
}

impl ActivationCodes {
    /// Binarize captured activations. Every capture's first axis must be the
    /// batch axis.
    pub fn from_captures(tape: &Tape, captures: &[ActivationCapture], n: usize) -> Self {
        let bits_per_input: usize =
            captures.iter().map(|c| tape.tensor(c.id).numel() / n).sum();
        let words_per_input = bits_per_input.div_ceil(64);
        let mut words = vec![0u64; n * words_per_input];
        let mut offset = 0usize;
        for capture in captures {
            let values = tape.values(capture.id);
            let block = values.len() / n;
            for input in 0..n {
                for (j, &v) in values[input * block..(input + 1) * block].iter().enumerate() {
                    if v > capture.threshold {
                        let bit = offset + j;
                        words[input * words_per_input + bit / 64] |= 1u64 << (bit % 64);
                    }
                }
            }
            offset += block;
        }
        ActivationCodes { n, bits_per_input, words_per_input, words }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// N_A: code length per input.
    pub fn bits_per_input(&self) -> usize {
        self.bits_per_input
    }

    pub fn is_empty(&self) -> bool {
        self.bits_per_input == 0
    }

    pub fn hamming(&self, a: usize, b: usize) -> usize {
        let wa = &self.words[a * self.words_per_input..(a + 1) * self.words_per_input];
        let wb = &self.words[b * self.words_per_input..(b + 1) * self.words_per_input];
        wa.iter().zip(wb).map(|(x, y)| (x ^ y).count_ones() as usize).sum()
    }

    /// The kernel K with `K[i][j] = N_A - hamming(i, j)`, row-major.
    pub fn kernel(&self) -> Vec<f64> {
        let n = self.n;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = self.bits_per_input as f64;
            for j in i + 1..n {
                let v = (self.bits_per_input - self.hamming(i, j)) as f64;
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn codes_and_hamming() {
        let mut tape = Tape::new();
        // Two inputs, three units; thresholds at 0.
        let t = Tensor::from_values(vec![2, 3], vec![1.0, -1.0, 0.5, -0.2, 2.0, 0.1]).unwrap();
        let id = tape.leaf(t);
        let codes =
            ActivationCodes::from_captures(&tape, &[ActivationCapture { id, threshold: 0.0 }], 2);
        assert_eq!(codes.bits_per_input(), 3);
        // Input 0: 101, input 1: 011 -> hamming 2.
        assert_eq!(codes.hamming(0, 1), 2);
        assert_eq!(codes.hamming(0, 0), 0);
        let k = codes.kernel();
        assert_eq!(k, vec![3.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn multiple_captures_concatenate() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_values(vec![2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap());
        let b = tape.leaf(Tensor::from_values(vec![2, 1], vec![0.9, 0.1]).unwrap());
        let codes = ActivationCodes::from_captures(
            &tape,
            &[
                ActivationCapture { id: a, threshold: 0.0 },
                ActivationCapture { id: b, threshold: 0.5 },
            ],
            2,
        );
        assert_eq!(codes.bits_per_input(), 3);
        // Input 0: 11|1, input 1: 00|0 -> hamming 3.
        assert_eq!(codes.hamming(0, 1), 3);
    }
}
