//! Layer stacks over the autodiff tape.

mod builders;
mod model;
mod spec;

pub use builders::{
    build_aux_classifier, build_discriminator, build_eval_classifier, build_generator, build_triplet_encoder,
    ConvStage, DenseSchedule, GeneratorSchedule,
};
pub use model::{argmax_rows, softmax, Bound, Model, Noise, Pass, RunMode, Trace};
pub use spec::{Activation, ConvPadding, LayerSpec, ModelSpec};

#[cfg(test)]
mod tests {
    use super::*;
    use fsgan_autodiff::{gradcheck::finite_difference, Checkpoint, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn generator(r: &mut ChaCha8Rng) -> Model {
        Model::new(build_generator(3, 512, &GeneratorSchedule::default()).unwrap(), r).unwrap()
    }

    #[test]
    fn generator_emits_finite_spectrum_and_samples_noise() {
        let mut r = rng();
        let g = generator(&mut r);
        let code = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let (a, _) = g.predict(&code, &Pass::infer(), &mut r).unwrap();
        assert_eq!(a.shape(), &[1, 512]);
        assert!(a.is_finite());
        let (b, _) = g.predict(&code, &Pass::infer(), &mut r).unwrap();
        assert_ne!(a, b);
        let zero = Pass::infer().with_noise(Noise::Zero);
        let (c, _) = g.predict(&code, &zero, &mut r).unwrap();
        let (d, _) = g.predict(&code, &zero, &mut r).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn generator_schedule_must_widen() {
        let mut s = GeneratorSchedule::default();
        s.dense_widths = vec![32, 16];
        assert!(build_generator(3, 512, &s).is_err());
        assert!(build_generator(3, 64, &GeneratorSchedule::default()).is_err());
        assert!(build_generator(0, 512, &GeneratorSchedule::default()).is_err());
    }

    #[test]
    fn encoder_is_unit_norm_and_mode_deterministic() {
        let mut r = rng();
        let d = DenseSchedule::default();
        let enc = Model::new(build_triplet_encoder(512, &d.encoder_hidden, 4).unwrap(), &mut r).unwrap();
        let x = Tensor::randn(vec![5, 512], 3.0, &mut r);
        let (a, _) = enc.predict(&x, &Pass::infer(), &mut r).unwrap();
        let (b, _) = enc.predict(&x, &Pass::infer(), &mut r).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let (t1, trace) = enc.predict(&x, &Pass::train(), &mut r).unwrap();
        let (t2, _) = enc.predict(&x, &Pass::train().with_masks(trace.masks), &mut r).unwrap();
        assert_eq!(
            t1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn critic_output_is_linear_in_final_layer() {
        let mut r = rng();
        let mut d = Model::new(build_discriminator(512, &DenseSchedule::default().critic_hidden).unwrap(), &mut r).unwrap();
        let x = Tensor::randn(vec![3, 512], 1.0, &mut r);
        let (y, _) = d.predict(&x, &Pass::infer(), &mut r).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        let n = d.params().len();
        for p in &mut d.params_mut()[n - 2..] {
            *p = p.map(|v| 2.0 * v);
        }
        let (y2, _) = d.predict(&x, &Pass::infer(), &mut r).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    fn tiny_critic(input: usize, hidden: &[usize], r: &mut ChaCha8Rng) -> Model {
        Model::new(build_discriminator(input, hidden).unwrap(), r).unwrap()
    }

    #[test]
    fn input_gradient_of_linear_critic_is_its_weight() {
        let mut r = rng();
        let d = tiny_critic(4, &[], &mut r);
        let tape = Tape::new();
        let bound = d.bind(&tape, true);
        let x = tape.constant(Tensor::randn(vec![2, 4], 1.0, &mut r));
        let (_, g, _) = d.forward_with_input_grad(&bound, x, &Pass::train(), &mut r).unwrap();
        let w = &d.params()[0];
        for row in g.value().rows() {
            assert_eq!(row, w.data());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng();
        let d = tiny_critic(6, &[5, 4], &mut r);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut r);
        let tape = Tape::new();
        let bound = d.bind(&tape, false);
        let (_, g, trace) = d
            .forward_with_input_grad(&bound, tape.constant(x.clone()), &Pass::train(), &mut r)
            .unwrap();
        let pass = Pass::train().with_masks(trace.masks);
        let num = finite_difference(
            |v| {
                let (y, _) = d.predict(&v[0], &pass, &mut rng()).unwrap();
                y.sum()
            },
            &[x],
            1e-5,
        );
        for (a, n) in g.value().data().iter().zip(num[0].data()) {
            assert!(fsgan_autodiff::gradcheck::relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn input_gradient_refuses_unsupported_layers() {
        let mut r = rng();
        let enc = Model::new(build_triplet_encoder(8, &[4], 2).unwrap(), &mut r).unwrap();
        let tape = Tape::new();
        let bound = enc.bind(&tape, true);
        let x = tape.constant(Tensor::ones(vec![1, 8]));
        let err = enc.forward_with_input_grad(&bound, x, &Pass::infer(), &mut r).unwrap_err();
        assert!(err.to_string().contains("l2_normalize"));
    }

    #[test]
    fn classifiers_produce_logits() {
        let mut r = rng();
        let aux = Model::new(build_aux_classifier(5, 512).unwrap(), &mut r).unwrap();
        let e3 = Model::new(build_eval_classifier(5, 3, 512).unwrap(), &mut r).unwrap();
        let e12 = Model::new(build_eval_classifier(5, 12, 512).unwrap(), &mut r).unwrap();
        assert!(e12.param_count() > e3.param_count());
        let x = Tensor::randn(vec![2, 512], 1.0, &mut r);
        for m in [&aux, &e3, &e12] {
            let (y, _) = m.predict(&x, &Pass::infer(), &mut r).unwrap();
            assert_eq!(y.shape(), &[2, 5]);
            for row in softmax(&y).rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let (again, _) = m.predict(&x, &Pass::infer(), &mut r).unwrap();
            assert_eq!(y, again);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut r = rng();
        let mut g = generator(&mut r);
        let code = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        let (_, trace) = g.predict(&code, &Pass::train(), &mut r).unwrap();
        g.update_running_stats(&trace);
        let mut ck = Checkpoint::new();
        g.save_into(&mut ck, "generator").unwrap();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let ck = Checkpoint::read_from(&bytes[..]).unwrap();
        let back = Model::load_from(g.spec().clone(), &ck, "generator").unwrap();
        for (a, b) in g.params().iter().zip(back.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(g.running_stats(), back.running_stats());
        let zero = Pass::infer().with_noise(Noise::Zero);
        assert_eq!(
            g.predict(&code, &zero, &mut r).unwrap().0,
            back.predict(&code, &zero, &mut r).unwrap().0
        );
    }

    #[test]
    fn model_spec_round_trips_through_toml() {
        let spec = build_generator(2, 512, &GeneratorSchedule::default()).unwrap();
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = rng();
        let spec = ModelSpec {
            name: "bn".into(),
            input_shape: vec![1],
            layers: vec![LayerSpec::BatchNorm {
                momentum: 0.99,
                epsilon: 1e-5,
            }],
        };
        let mut m = Model::new(spec, &mut r).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (_, trace) = m.predict(&x, &Pass::train(), &mut r).unwrap();
        m.update_running_stats(&trace);
        let (mean, var) = &m.running_stats()[0];
        assert!((mean[0] - 0.02).abs() < 1e-15);
        assert!((var[0] - (0.99 + 0.01)).abs() < 1e-15);
    }
}
