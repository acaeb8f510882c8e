use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Token id used for the unconditional (empty) prompt.
pub const NULL_TOKEN: u32 = 0;

/// Per-token text vectors standing in for a text encoder's output.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<u32>,
    pub vectors: Matrix,
    pub subject_token_pos: usize,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Each token's vector is a pure function of `(token, seed)`: identical
/// tokens get identical rows wherever they appear.
pub fn embed_prompt(tokens: &[u32], subject_pos: usize, embed_dim: usize, seed: u64) -> Result<PromptEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Precondition("prompt has no tokens".into()));
    }
    if subject_pos >= tokens.len() {
        return Err(Error::Precondition(format!(
            "subject position {subject_pos} is outside a {}-token prompt",
            tokens.len()
        )));
    }
    let mut data = Vec::with_capacity(tokens.len() * embed_dim);
    for &t in tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(u64::from(t))));
        data.extend((0..embed_dim).map(|_| -> f32 { StandardNormal.sample(&mut rng) }));
    }
    Ok(PromptEmbedding {
        tokens: tokens.to_vec(),
        vectors: Matrix::new(tokens.len(), embed_dim, data)?,
        subject_token_pos: subject_pos,
    })
}

pub fn unconditional(embed_dim: usize, seed: u64) -> PromptEmbedding {
    embed_prompt(&[NULL_TOKEN], 0, embed_dim, seed).expect("single-token prompt is valid")
}
