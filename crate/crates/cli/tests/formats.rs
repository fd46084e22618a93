use std::path::Path;
use std::sync::OnceLock;

use chorus_cli::{Checkpoint, RunConfig};
use chorus_core::encoders::{Dims, Encoders};
use chorus_core::pretraining::RegimeName;
use proptest::prelude::*;

fn sample_bytes() -> &'static [u8] {
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    BYTES.get_or_init(|| {
        let dims = Dims {
            latent: 4,
            conv1: 4,
            conv2: 4,
            context_hidden: 8,
            decoder_hidden: 8,
            ..Dims::default()
        };
        Checkpoint {
            regime: Some(RegimeName::Medium),
            seed: 2,
            encoders: Encoders::init(dims, 2).unwrap(),
            head: None,
        }
        .to_bytes()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..1_000_000) {
        let bytes = sample_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("t")).is_err());
    }

    #[test]
    fn corrupted_checkpoints_never_panic(pos in 0usize..1_000_000, byte in any::<u8>()) {
        let mut bytes = sample_bytes().to_vec();
        let pos = pos % bytes.len();
        bytes[pos] = byte;
        if let Ok(ck) = Checkpoint::from_bytes(&bytes, Path::new("t")) {
            // Only blob values or harmless header bytes can change without an error.
            prop_assert_eq!(ck.to_bytes().len(), bytes.len());
        }
    }

    #[test]
    fn configs_round_trip_through_toml(seed in 0u64..1000, budget in 0.001f64..1.0, capacity in 1usize..64) {
        let mut c = RunConfig::default();
        c.override_seed(seed);
        c.experiment.budget = budget;
        c.stream.capacity = capacity;
        let text = toml::to_string(&c).unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }
}
