use lora_override::adapter::{boost_global, Adapter, BoostTarget, LayerFactors};
use lora_override::desk::{argmax, DeskModel, DeskModelConfig, PlantedFact};
use lora_override::matrix::{dot, Matrix};
use lora_override::Error;

fn vocab() -> Vec<String> {
    [
        "capital", "currency", "zorbia", "vexlo", "paris", "lyon", "tokyo", "berlin", "rome",
        "oslo",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn config() -> DeskModelConfig {
    DeskModelConfig::new(4, 24, vocab(), 42)
}

fn fact(key: &[&str], answer: &str, frequency: f64, layer_id: usize) -> PlantedFact {
    PlantedFact {
        context_key: key.iter().map(|s| s.to_string()).collect(),
        answer_token: answer.to_string(),
        frequency,
        layer_id,
    }
}

fn logit_spread(l: &[f64]) -> f64 {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = l.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn adapter_for(model: &DeskModel, layers: &[usize], seed: u64) -> Adapter {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    let rank = 2;
    let factors = layers
        .iter()
        .map(|&l| {
            let a = Matrix::from_fn(rank, model.hidden_width(l), |_, _| next());
            let b = Matrix::from_fn(model.d_model(), rank, |_, _| next());
            LayerFactors::new(l, a, b).unwrap()
        })
        .collect();
    Adapter::new(factors, rank, 4.0).unwrap()
}

#[test]
fn no_facts_means_near_uniform_logits() {
    let model = DeskModel::build(config(), vec![]).unwrap();
    for prompt in [
        "capital zorbia",
        "currency vexlo",
        "paris",
        "rome oslo tokyo",
    ] {
        let l = model.logits(prompt, None).unwrap();
        assert!(logit_spread(&l) < 0.1, "{prompt}: {}", logit_spread(&l));
    }
}

#[test]
fn planted_fact_wins_argmax() {
    let model = DeskModel::build(
        config(),
        vec![fact(&["capital", "zorbia"], "lyon", 100.0, 2)],
    )
    .unwrap();
    let l = model.logits("capital zorbia", None).unwrap();
    assert_eq!(argmax(&l), model.token_id("lyon").unwrap());
    // The key is order-free and does not fire on a prompt sharing one token.
    let other = model.logits("capital vexlo", None).unwrap();
    assert!(logit_spread(&other) < 0.1);
}

#[test]
fn higher_frequency_fact_wins_on_shared_key() {
    let model = DeskModel::build(
        config(),
        vec![
            fact(&["capital", "zorbia"], "lyon", 10.0, 1),
            fact(&["capital", "zorbia"], "paris", 1000.0, 2),
        ],
    )
    .unwrap();
    let l = model.logits("capital zorbia", None).unwrap();
    assert_eq!(argmax(&l), model.token_id("paris").unwrap());
    // value magnitudes are c + lambda * ln f
    let gap = l[model.token_id("paris").unwrap()] - l[model.token_id("lyon").unwrap()];
    let expected = 0.5 * (1000f64.ln() - 10f64.ln());
    assert!((gap - expected).abs() < 0.1, "gap {gap} vs {expected}");
}

#[test]
fn zero_adapter_is_neutral_bit_for_bit() {
    let model = DeskModel::build(
        config(),
        vec![fact(&["capital", "zorbia"], "lyon", 100.0, 2)],
    )
    .unwrap();
    let zero = adapter_for(&model, &[0, 1, 2, 3], 3).zeroed();
    for prompt in ["capital zorbia", "currency vexlo"] {
        assert_eq!(
            model.logits(prompt, None).unwrap(),
            model.logits(prompt, Some(&zero)).unwrap()
        );
    }
}

#[test]
fn last_layer_logit_shift_is_linear_in_beta() {
    let model = DeskModel::build(
        config(),
        vec![fact(&["capital", "zorbia"], "lyon", 100.0, 3)],
    )
    .unwrap();
    let last = model.n_layers() - 1;
    let adapter = adapter_for(&model, &[last], 9);
    let prompt = "capital zorbia";
    let base = model.logits(prompt, None).unwrap();

    // closed form: delta_logit = U * (alpha/r) * B * A * z_last
    let z = &model.hidden_activations(prompt).unwrap()[last];
    let f = adapter.layer(last).unwrap();
    let low = f.a_matrix.apply(z);
    let delta_h: Vec<f64> = f
        .b_matrix
        .apply(&low)
        .iter()
        .map(|v| v * adapter.scale() / 2.0)
        .collect();
    let shift1 = model.logits(prompt, Some(&adapter)).unwrap();
    for (t, (s, b)) in shift1.iter().zip(&base).enumerate() {
        let closed = dot(model.unembedding(t), &delta_h);
        assert!((s - b - closed).abs() < 1e-9 * (1.0 + closed.abs()));
    }

    for beta in [0.5, 1.75, 3.0] {
        let boosted = boost_global(&adapter, beta, BoostTarget::A).unwrap();
        let shifted = model.logits(prompt, Some(&boosted)).unwrap();
        for ((s, s1), b) in shifted.iter().zip(&shift1).zip(&base) {
            let want = beta * (s1 - b);
            assert!(((s - b) - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn logits_shape_and_finiteness() {
    let model =
        DeskModel::build(config(), vec![fact(&["capital", "zorbia"], "lyon", 1e4, 0)]).unwrap();
    let l = model.logits("zorbia capital lyon", None).unwrap();
    assert_eq!(l.len(), vocab().len());
    assert!(l.iter().all(|v| v.is_finite()));
}

#[test]
fn build_is_deterministic() {
    let facts = vec![fact(&["capital", "zorbia"], "lyon", 100.0, 2)];
    let a = DeskModel::build(config(), facts.clone()).unwrap();
    let b = DeskModel::build(config(), facts).unwrap();
    let ad = adapter_for(&a, &[1, 2], 5);
    for p in ["capital zorbia", "rome"] {
        let la = a.logits(p, Some(&ad)).unwrap();
        let lb = b.logits(p, Some(&ad)).unwrap();
        assert_eq!(
            la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn generation_contracts() {
    let model = DeskModel::build(
        config(),
        vec![fact(&["capital", "zorbia"], "lyon", 100.0, 2)],
    )
    .unwrap();
    let one = model.generate("capital zorbia", None, 1, 0.0, 0).unwrap();
    let l = model.logits("capital zorbia", None).unwrap();
    assert_eq!(one.token_ids, vec![argmax(&l)]);
    assert_eq!(one.tokens, vec!["lyon".to_string()]);

    let s1 = model.generate("capital vexlo", None, 6, 1.0, 17).unwrap();
    let s2 = model.generate("capital vexlo", None, 6, 1.0, 17).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.tokens.len(), 6);
    assert_eq!(s1.logprobs.len(), 6);

    assert!(model.generate("capital zorbia", None, 1, -0.1, 0).is_err());
    assert!(model.generate("capital zorbia", None, 0, 0.0, 0).is_err());
}

#[test]
fn errors() {
    let model = DeskModel::build(config(), vec![]).unwrap();
    assert!(
        matches!(model.logits("capital atlantis", None), Err(Error::UnknownToken(t)) if t == "atlantis")
    );
    assert!(model.logits("   ", None).is_err());

    let other = DeskModel::build(DeskModelConfig::new(4, 16, vocab(), 1), vec![]).unwrap();
    let wrong = adapter_for(&other, &[1], 1);
    assert!(matches!(
        model.logits("rome", Some(&wrong)),
        Err(Error::Shape(_))
    ));

    assert!(DeskModel::build(config(), vec![fact(&["capital"], "atlantis", 10.0, 0)]).is_err());
    assert!(DeskModel::build(config(), vec![fact(&["capital"], "lyon", 10.0, 4)]).is_err());
    assert!(DeskModel::build(config(), vec![fact(&["capital"], "lyon", 0.0, 0)]).is_err());
    assert!(DeskModel::build(DeskModelConfig::new(1, 24, vocab(), 0), vec![]).is_err());
    assert!(DeskModel::build(DeskModelConfig::new(4, 3, vocab(), 0), vec![]).is_err());
    let mut dup = vocab();
    dup.push("rome".into());
    assert!(DeskModel::build(DeskModelConfig::new(4, 24, dup, 0), vec![]).is_err());
}

#[test]
fn answer_logprob_tracks_frequency() {
    let weak = DeskModel::build(
        config(),
        vec![fact(&["capital", "zorbia"], "lyon", 10.0, 2)],
    )
    .unwrap();
    let strong =
        DeskModel::build(config(), vec![fact(&["capital", "zorbia"], "lyon", 1e4, 2)]).unwrap();
    let lw = weak.answer_logprob("capital zorbia", "lyon", None).unwrap();
    let ls = strong
        .answer_logprob("capital zorbia", "lyon", None)
        .unwrap();
    assert!(ls > lw && ls < 0.0);
}
