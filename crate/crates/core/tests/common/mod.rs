#![allow(dead_code)]

pub mod oracle;

use rand::Rng;
use softpipe::tasks::Token;

/// Up to ten tokens over a small alphabet, with the odd special mixed in.
pub fn random_sequence<R: Rng>(rng: &mut R) -> Vec<Token> {
    let len = rng.random_range(0..=10);
    (0..len)
        .map(|_| if rng.random_bool(0.1) { rng.random_range(0..8) } else { rng.random_range(8..14) })
        .collect()
}
