mod common;

use common::{random_cnn, sparsify};
use modelshift::format::{bit_identical, deserialize, serialize};
use modelshift::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_round_trips(seed in any::<u64>(), sparse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_cnn(&mut rng);
        if sparse {
            m = sparsify(&m, false, &mut rng);
        }
        let bytes = serialize(&m);
        let back = deserialize(&bytes).unwrap();
        prop_assert!(bit_identical(&m, &back));
        prop_assert_eq!(serialize(&back), bytes);
        prop_assert!(m.param_count() >= m.nonzero_count());
    }

    #[test]
    fn truncation_is_a_format_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let m = random_cnn(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = serialize(&m);
        let at = (cut * bytes.len() as f64) as usize;
        let truncated = matches!(deserialize(&bytes[..at]), Err(Error::Format { .. }));
        prop_assert!(truncated);
    }
}
