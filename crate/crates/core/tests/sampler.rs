use itemforge_core::markov::NGramModel;
use itemforge_core::sampler::{
    argmax, generate, generate_ids, generate_markov_text, render_template, sampling_distribution,
    GenerationParams, PromptTemplate, SamplerError,
};
use itemforge_core::tokenizer::Vocabulary;
use itemforge_core::transformer::{ModelConfig, ModelState};
use proptest::prelude::*;

fn byte_model(seed: u64) -> ModelState<f32> {
    let config = ModelConfig {
        vocab_size: 257,
        context_len: 32,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        dropout: 0.0,
        seed,
    };
    ModelState::init(config).unwrap()
}

#[test]
fn templates_render_exactly() {
    let qa = PromptTemplate::QaDistractor {
        question: "What are the most common side effects of statins?".into(),
    };
    assert_eq!(
        render_template(&qa).unwrap(),
        "Q: What are the most common side effects of statins? A:"
    );
    let stem = "A 52-year-old man complaining about chest pain and headache is coming to the emergency room.";
    let v = PromptTemplate::Vignette { stem: stem.into() };
    assert_eq!(render_template(&v).unwrap(), stem);
    let raw = PromptTemplate::Raw { text: String::new() };
    assert!(matches!(render_template(&raw), Err(SamplerError::PromptEmpty)));
    let missing = PromptTemplate::QaDistractor { question: String::new() };
    assert_eq!(render_template(&missing).unwrap_err().name(), "TemplateError");
}

#[test]
fn greedy_follows_argmax_and_equals_top_one() {
    let model = byte_model(1);
    let vocab = Vocabulary::byte_level();
    let greedy = GenerationParams {
        temperature: 0.0,
        max_tokens: 12,
        stop_at_end_of_text: false,
        seed: 5,
        ..GenerationParams::default()
    };
    let prompt = vocab.encode(b"Q: dose? A:");
    let a = generate_ids(&model, &prompt, vocab.eot_id(), &greedy).unwrap();
    let b = generate_ids(&model, &prompt, vocab.eot_id(), &GenerationParams { seed: 99, ..greedy.clone() }).unwrap();
    assert_eq!(a, b);
    let top1 = GenerationParams {
        temperature: 1.3,
        top_k: 1,
        ..greedy.clone()
    };
    assert_eq!(generate_ids(&model, &prompt, vocab.eot_id(), &top1).unwrap(), a);

    let mut seq = prompt.clone();
    for &id in &a[0] {
        let logits: Vec<f64> = model.next_logits(&seq).unwrap().iter().map(|&v| v as f64).collect();
        assert_eq!(id as usize, argmax(&logits));
        seq.push(id);
    }
}

#[test]
fn samples_reproducible_per_index() {
    let model = byte_model(2);
    let vocab = Vocabulary::byte_level();
    let p = GenerationParams {
        max_tokens: 10,
        n_samples: 3,
        seed: 7,
        stop_at_end_of_text: false,
        ..GenerationParams::default()
    };
    let first = generate(&model, &vocab, "A 52-year-old", &p).unwrap();
    assert_eq!(first.len(), 3);
    assert_eq!(generate(&model, &vocab, "A 52-year-old", &p).unwrap(), first);
    let single = generate(&model, &vocab, "A 52-year-old", &GenerationParams { n_samples: 1, ..p.clone() }).unwrap();
    assert_eq!(single[0], first[0]);
    let ids = generate_ids(&model, &vocab.encode(b"A 52-year-old"), vocab.eot_id(), &p).unwrap();
    assert_ne!(ids[0], ids[1]);
}

#[test]
fn prompt_bounds() {
    let model = byte_model(3);
    let vocab = Vocabulary::byte_level();
    let p = GenerationParams::default();
    assert_eq!(generate(&model, &vocab, "", &p).unwrap_err().name(), "PromptEmpty");
    let long = "x".repeat(32);
    let err = generate(&model, &vocab, &long, &p).unwrap_err();
    assert!(matches!(err, SamplerError::PromptTooLong { len: 32, context_len: 32 }));
    assert!(generate(&model, &vocab, &long[..31], &GenerationParams { max_tokens: 3, ..p }).is_ok());
}

#[test]
fn markov_sampling_parity() {
    let vocab = Vocabulary::byte_level();
    let chain = vocab.encode(b"abcdabcdabcdabcd");
    let model = NGramModel::fit(&chain, 1, 257, 0.0).unwrap();
    let p = GenerationParams {
        max_tokens: 6,
        n_samples: 2,
        ..GenerationParams::default()
    };
    assert_eq!(generate_markov_text(&model, &vocab, "b", &p).unwrap(), ["cdabcd", "cdabcd"]);

    let smoothed = NGramModel::fit(&chain, 2, 257, 0.5).unwrap();
    let q = GenerationParams { top_k: 0, temperature: 1.0, n_samples: 4, seed: 3, ..p };
    let a = generate_markov_text(&smoothed, &vocab, "ab", &q).unwrap();
    assert_eq!(generate_markov_text(&smoothed, &vocab, "ab", &q).unwrap(), a);

    let err = generate_markov_text(&model, &vocab, "z", &q).unwrap_err();
    assert!(matches!(err, SamplerError::Markov { sample: 0, .. }));
    assert_eq!(err.name(), "UnseenContext");
}

proptest! {
    #[test]
    fn truncated_distribution_is_valid(
        logits in prop::collection::vec(-20.0f64..20.0, 2..64),
        temperature in 0.05f64..4.0,
        k in 0usize..70,
    ) {
        let probs = sampling_distribution(&logits, temperature, k);
        prop_assert!(probs.iter().all(|&p| p >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let support = probs.iter().filter(|&&p| p > 0.0).count();
        if k > 0 {
            prop_assert!(support <= k);
        }
        let wider = sampling_distribution(&logits, temperature, k + 1);
        if k > 0 {
            for (p, w) in probs.iter().zip(&wider) {
                prop_assert!(*p == 0.0 || *w > 0.0);
            }
        }
    }

    #[test]
    fn ties_at_cutoff_keep_lower_ids(n in 3usize..20, k in 1usize..3) {
        let logits = vec![1.0; n];
        let probs = sampling_distribution(&logits, 1.0, k);
        let kept: Vec<usize> = (0..n).filter(|&i| probs[i] > 0.0).collect();
        prop_assert_eq!(kept, (0..k).collect::<Vec<_>>());
    }
}
