//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softpipe::model::{ModelConfig, Seq2SeqModel};
use softpipe::tasks::{gen_dataset, ToyTaskSpec, XlsRecord};
use softpipe::Tensor;

/// A freshly initialized default-size model and a handful of test records.
pub fn default_model(seed: u64) -> (Seq2SeqModel<f32>, Vec<XlsRecord>) {
    let model = Seq2SeqModel::new(ModelConfig::default(), seed).expect("default config is valid");
    let data = gen_dataset(&ToyTaskSpec::default(), 0, 0, 16).expect("default spec is valid");
    (model, data.records)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}
