use spangate::data_forge::{corpus_vocab, gen_synthetic, hard_negatives, parse_jsonl, to_jsonl, SftRecord};
use spangate::decode::LogitSource;
use spangate::losses::{exact_match_rate, train_sft, TinySoftmaxLM, TrainConfig};
use spangate::pipeline::{encode_all, ToyConfig};
use spangate::Schema;

fn corpus(n: usize) -> (Schema, Vec<SftRecord>) {
    let schema = Schema::ner(&["Person", "Location"]).unwrap();
    let records = gen_synthetic(&schema, n, 5);
    (schema, records)
}

#[test]
fn zero_epochs_returns_the_initial_weights() {
    let (schema, records) = corpus(10);
    let vocab = corpus_vocab(&schema, &records).unwrap();
    let cfg = ToyConfig::new(1);
    let init = TinySoftmaxLM::new(cfg.lm_config(&vocab), 1);
    let out = train_sft(init.clone(), &encode_all(&vocab, &records).unwrap(), &TrainConfig { epochs: 0, ..TrainConfig::sft(1) })
        .unwrap();
    assert_eq!(out.model.params, init.params);
    assert!(out.log.is_empty());
}

#[test]
fn a_single_record_is_memorised() {
    let (schema, records) = corpus(1);
    let vocab = corpus_vocab(&schema, &records).unwrap();
    let examples = encode_all(&vocab, &records).unwrap();
    let cfg = ToyConfig::new(2);
    let init = TinySoftmaxLM::new(cfg.lm_config(&vocab), 2);
    let out = train_sft(init, &examples, &TrainConfig { epochs: 150, ..TrainConfig::sft(2) }).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first * 0.1, "loss {first} -> {last}");
    assert_eq!(exact_match_rate(&out.model, &vocab, &schema, &examples).unwrap(), 1.0);
}

#[test]
fn training_is_a_function_of_the_seed() {
    let (schema, records) = corpus(12);
    let vocab = corpus_vocab(&schema, &records).unwrap();
    let examples = encode_all(&vocab, &records).unwrap();
    let cfg = ToyConfig::new(3);
    let run = |seed| {
        let init = TinySoftmaxLM::new(cfg.lm_config(&vocab), seed);
        train_sft(init, &examples, &TrainConfig { epochs: 3, ..TrainConfig::sft(seed) }).unwrap().model
    };
    assert_eq!(run(3).params, run(3).params);
    assert_ne!(run(3).params, run(4).params);
}

#[test]
fn hard_negatives_repeat_and_differ_from_gold() {
    let (schema, records) = corpus(15);
    let vocab = corpus_vocab(&schema, &records).unwrap();
    let cfg = ToyConfig::new(4);
    let model = TinySoftmaxLM::new(cfg.lm_config(&vocab), 4);
    let sources: Vec<&dyn LogitSource> = vec![&model];
    let a = hard_negatives(&sources, &vocab, &schema, &records, &[1.0, 1.5], 2, 9).unwrap();
    let b = hard_negatives(&sources, &vocab, &schema, &records, &[1.0, 1.5], 2, 9).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
    for pair in &a {
        assert_ne!(pair.positive(), pair.negative());
    }
}

#[test]
fn corpus_vocab_covers_every_record() {
    let (schema, records) = corpus(40);
    let vocab = corpus_vocab(&schema, &records).unwrap();
    for r in &records {
        for text in [&r.instruction, &r.context, &r.output] {
            let ids = vocab.encode(text).unwrap();
            assert_eq!(&vocab.decode(&ids).unwrap(), text);
        }
    }
}

#[test]
fn jsonl_round_trips() {
    let (_, records) = corpus(8);
    let back: Vec<SftRecord> = parse_jsonl(&to_jsonl(&records)).unwrap();
    assert_eq!(back, records);
}
