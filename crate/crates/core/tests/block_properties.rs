use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnet::autograd::Tape;
use tnet::blocks::{channel_attention, position_attention, weighted_fuse, Rdb, RdbSpec};
use tnet::params::ParamStore;
use tnet::stack::{StackConfig, StackTNet};
use tnet::tensor::Tensor;
use tnet::tnet::{build_tnet, tnet_infer, TNetConfig};

fn random(shape: &[usize], seed: u64, scale: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_stays_finite_and_row_stochastic(
        seed in any::<u64>(), c in 1usize..6, h in 1usize..5, w in 1usize..5, scale in 0.1f32..30.0, gamma in -2.0f32..2.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, c, h, w], seed, scale));
        let g = tape.constant(Tensor::scalar(gamma));
        let pos = position_attention(&mut tape, x, g).unwrap();
        let chan = channel_attention(&mut tape, x, g).unwrap();
        for (att, len) in [(pos.attention, h * w), (chan.attention, c)] {
            for row in tape.value(att).data().chunks(len) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-4, "row sum {}", s);
            }
        }
        prop_assert!(tape.value(pos.output).is_finite());
        prop_assert!(tape.value(chan.output).is_finite());
    }

    #[test]
    fn fusion_with_unit_and_zero_weights_selects_one_input(seed in any::<u64>(), c in 1usize..5) {
        let mut tape = Tape::new();
        let lt = random(&[1, c, 3, 4], seed, 1.0);
        let lateral = tape.constant(lt.clone());
        let vertical = tape.constant(random(&[1, c, 3, 4], seed ^ 1, 1.0));
        let one = tape.constant(Tensor::full(&[c], 1.0));
        let zero = tape.constant(Tensor::zeros(&[c]));
        let y = weighted_fuse(&mut tape, lateral, vertical, one, zero, 0).unwrap();
        prop_assert!(tape.value(y).bit_eq(&lt));
    }

    #[test]
    fn rdb_preserves_shape_and_finiteness(seed in any::<u64>(), channels in 1usize..6, growth in 1usize..5, layers in 2usize..5) {
        let rdb = Rdb::new("r", RdbSpec { channels, growth, layers }).unwrap();
        let mut store = ParamStore::<f32>::new();
        rdb.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(&store, false);
        let x = tape.constant(random(&[2, channels, 5, 3], seed, 2.0));
        let y = rdb.forward(&mut tape, &p, x).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[2, channels, 5, 3]);
        prop_assert!(tape.value(y).is_finite());
    }

    #[test]
    fn backbone_output_matches_input_size(seed in any::<u64>(), m in 1usize..4, n in 0usize..3, k in 1usize..3, batch in 1usize..3) {
        let n = if m == 1 { 0 } else { n };
        let cfg = TNetConfig { m, n, base_channels: 2, rdb_growth: 4, rdb_layers: 2, ..TNetConfig::default() };
        let (net, store) = build_tnet::<f32>(cfg, seed).unwrap();
        let side = k << m;
        let y = tnet_infer(&net, &store, &random(&[batch, 6, side, 2 * side], seed, 1.0)).unwrap();
        prop_assert_eq!(y.shape(), &[batch, 3, side, 2 * side]);
        prop_assert!(y.is_finite());
    }

    #[test]
    fn shared_stack_outputs_are_prefixes(seed in any::<u64>(), k in 1usize..4, j in 1usize..4) {
        let cfg = TNetConfig { m: 2, n: 1, base_channels: 2, rdb_growth: 4, rdb_layers: 2, ..TNetConfig::default() };
        let model = StackTNet::<f32>::build(cfg, StackConfig { stages: k, share_parameters: true }, seed).unwrap();
        let hazy = random(&[1, 3, 8, 8], seed ^ 3, 1.0);
        let long = model.infer_stages(&hazy, k.max(j)).unwrap();
        let short = model.infer_stages(&hazy, k.min(j)).unwrap();
        for (a, b) in short.per_stage.iter().zip(&long.per_stage) {
            prop_assert!(a.bit_eq(b));
        }
    }
}
