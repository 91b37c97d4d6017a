//! A fresh model trained on a single synthetic language has to learn it.
//! Everything downstream (forgetting, replay, LID) is meaningless otherwise.

use std::rc::Rc;

use polyglot_core::cltrain::{language_aware_wer, mean_loss, train_step, Example};
use polyglot_core::experiment::ExperimentConfig;
use polyglot_core::langgen::{default_inventory, generate_language, Acoustics, Utterance};
use polyglot_core::model::Model;
use polyglot_core::numcore::{AdamW, AdamWConfig, Matrix};
use polyglot_core::rng::{derive_seed, substream};
use rand::seq::SliceRandom;
use polyglot_core::vocab::{Vocabulary, EOT};

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[test]
fn single_language_is_learnable() {
    let mut c = ExperimentConfig::quick();
    c.family.old = vec!["ka".to_string()];
    let seed = 7;
    let vocab = Vocabulary::new(&default_inventory(), &c.family.old).unwrap();
    let spec = c.family.build(&vocab, c.model.feature_dim, seed).unwrap().remove(0);
    assert_eq!(spec.name, "ka");
    let acoustics = Acoustics::generate(&vocab, c.model.feature_dim, c.model.frames_per_token, derive_seed(seed, "acoustics"));
    let corpus = generate_language(&spec, c.data, &vocab).unwrap();
    let examples = |utts: &[Utterance]| -> Vec<Example> {
        utts.iter()
            .map(|u| Example {
                id: u.id.clone(),
                language: "ka".to_string(),
                transcript: u.tokens.clone(),
                input: Rc::new(u.features::<f32>(&spec, &acoustics, &vocab).unwrap()),
            })
            .collect()
    };
    let (train, dev, test) = (examples(&corpus.train), examples(&corpus.dev), examples(&corpus.test));

    // Plain minibatch training with the pretraining budget, keeping the
    // weights with the best dev loss.
    let mut model = Model::<f32>::new(c.model, vocab, derive_seed(seed, "init")).unwrap();
    let tc = &c.pretrain.train;
    let mut opt = AdamW::new(AdamWConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..Default::default()
    });
    let view = model.base_view();
    let dev_refs: Vec<&Example> = dev.iter().collect();
    let mut rng = substream(seed, "batches");
    let mut best = (f64::INFINITY, model.params.values());
    let mut step = 0;
    for _ in 0..tc.epochs as usize {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            train_step(&mut model, &mut opt, &batch, &view, true, step).unwrap();
            step += 1;
        }
        let v = mean_loss(&model, &dev_refs, &view, true).unwrap();
        if v < best.0 {
            best = (v, model.params.values());
        }
    }
    model.params.restore_values(&best.1);

    let w = language_aware_wer(&model, "ka", &test, true).unwrap();
    assert!(w.utterances >= 200);
    assert!(w.fraction() < 0.15, "test WER {:.3}", w.fraction());

    // Teacher forcing on the training split: the argmax at every position
    // should be the next target token.
    let view = model.view("ka").unwrap();
    let (mut hits, mut steps) = (0usize, 0usize);
    for ex in train.iter().take(100) {
        let target = ex.target(&model.vocab).unwrap();
        assert_eq!(*target.last().unwrap(), EOT);
        let memory = model.encode(&ex.input).unwrap();
        // Row `pos` predicts target[pos + 1]; row 0 (the LID) is given.
        let logits: Matrix<f32> = model.decoder_logits(&memory, &target[..target.len() - 1], &view).unwrap();
        for pos in 1..target.len() - 1 {
            let predicted = view.global(argmax(logits.row(pos)));
            hits += usize::from(predicted == target[pos + 1]);
            steps += 1;
        }
    }
    let acc = hits as f64 / steps as f64;
    assert!(acc >= 0.95, "teacher-forced accuracy {acc:.3} over {steps} steps");
}
