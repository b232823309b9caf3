use std::io::Write;

use proptest::prelude::*;
use rand::Rng;
use simpleformer::data::{
    batch_sampler, eval_batch, load_corpus, synthetic_copy_task, Batch, BatchSource, Corpus, CorpusSource, BYTE_VOCAB,
};
use simpleformer::Error;

fn text(n: usize) -> Vec<u8> {
    (0..n).map(|i| b"fn main() { let x = 42; }\n"[i % 26]).collect()
}

#[test]
fn bytes_become_ids() {
    let c = Corpus::from_bytes(b"ab").unwrap();
    assert_eq!(c.ids(), &[97, 98]);
    assert_eq!(c.vocab(), BYTE_VOCAB);
    assert_eq!(c.len(), 2);
    assert!(c.eval().is_empty());
}

#[test]
fn eval_split_is_the_five_percent_suffix() {
    let bytes: Vec<u8> = (0..1000).map(|i| (i % 251) as u8).collect();
    let c = Corpus::from_bytes(&bytes).unwrap();
    assert_eq!(c.train().len(), 950);
    assert_eq!(c.eval().len(), 50);
    assert_eq!(c.eval()[0], (950 % 251) as u32);
    assert!(c.ids().iter().all(|&t| (t as usize) < c.vocab()));
}

#[test]
fn digest_tracks_content() {
    let a = Corpus::from_bytes(b"hello").unwrap();
    assert_eq!(a.digest(), Corpus::from_bytes(b"hello").unwrap().digest());
    assert_ne!(a.digest(), Corpus::from_bytes(b"hellp").unwrap().digest());
    assert_eq!(a.digest(), "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
}

#[test]
fn loading_files() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(b"some source text").unwrap();
    let c = load_corpus(f.path()).unwrap();
    assert_eq!(c, Corpus::from_bytes(b"some source text").unwrap());
    let empty = tempfile::NamedTempFile::new().unwrap();
    assert!(matches!(load_corpus(empty.path()), Err(Error::Config(_))));
    assert!(load_corpus(std::path::Path::new("/nonexistent/corpus.txt")).is_err());
}

#[test]
fn sampler_is_a_function_of_seed_and_step() {
    let c = Corpus::from_bytes(&text(5000)).unwrap();
    let a = batch_sampler(&c, 8, 16, 3, 7).unwrap();
    assert_eq!(a, batch_sampler(&c, 8, 16, 3, 7).unwrap());
    assert_ne!(a, batch_sampler(&c, 8, 16, 3, 8).unwrap());
    assert_ne!(a, batch_sampler(&c, 8, 16, 4, 7).unwrap());
    assert_eq!((a.batch, a.seq_len, a.inputs.len()), (8, 16, 128));
}

#[test]
fn sampler_rejects_short_corpus() {
    let c = Corpus::from_bytes(&text(20)).unwrap();
    assert!(matches!(batch_sampler(&c, 2, 32, 0, 0), Err(Error::Config(_))));
    assert!(eval_batch(&c, 2, 32, 0).is_err());
}

#[test]
fn sampler_covers_the_training_split() {
    // chi-square over 10 equal bins of window starts
    let mut rng = simpleformer::params::tensor_rng(0, "coverage");
    let bytes: Vec<u8> = (0..20000).map(|_| rng.random()).collect();
    let c = Corpus::from_bytes(&bytes).unwrap();
    let t = 8;
    let last = c.train().len() - t - 1;
    let starts: Vec<usize> = (0..400)
        .flat_map(|step| {
            let b = batch_sampler(&c, 16, t, 1, step).unwrap();
            (0..16).map(move |r| (r, b.clone())).collect::<Vec<_>>()
        })
        .map(|(r, b)| {
            let w = &b.inputs[r * t..(r + 1) * t];
            let w: Vec<u32> = w.iter().map(|&x| x as u32).collect();
            c.train().windows(t).position(|x| x == w.as_slice()).unwrap()
        })
        .collect();
    let bins = 10;
    let mut counts = vec![0f64; bins];
    for s in &starts {
        counts[(s * bins / (last + 1)).min(bins - 1)] += 1.0;
    }
    let expected = starts.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    assert!(chi2 < 30.0, "chi-square {chi2} over {counts:?}");
}

#[test]
fn eval_batches_tile_the_eval_split() {
    let c = Corpus::from_bytes(&text(4000)).unwrap();
    let b = eval_batch(&c, 3, 10, 0).unwrap();
    let eval = c.eval();
    for r in 0..3 {
        let want: Vec<usize> = eval[r * 10..r * 10 + 10].iter().map(|&x| x as usize).collect();
        assert_eq!(b.row_inputs(r), want.as_slice());
    }
    assert_eq!(b, eval_batch(&c, 3, 10, 0).unwrap());
    let slots = (eval.len() - 1) / 10;
    let wrapped = eval_batch(&c, 1, 10, slots).unwrap();
    assert_eq!(wrapped.row_inputs(0), b.row_inputs(0));
}

#[test]
fn corpus_source_serves_both_splits() {
    let c = Corpus::from_bytes(&text(4000)).unwrap();
    let src = CorpusSource { corpus: &c, batch: 4, seq_len: 8, seed: 2 };
    assert_eq!(src.train_batch(5).unwrap(), batch_sampler(&c, 4, 8, 2, 5).unwrap());
    assert_eq!(src.eval_batch(1).unwrap().unwrap(), eval_batch(&c, 4, 8, 1).unwrap());
}

#[test]
fn batch_slicing() {
    let windows: Vec<Vec<u32>> = (0..4).map(|b| (0..5).map(|t| b * 10 + t).collect()).collect();
    let batch = Batch::from_windows(windows.iter().map(Vec::as_slice), 4);
    assert_eq!(batch.row_inputs(2), &[20, 21, 22, 23]);
    assert_eq!(batch.row_targets(2), &[21, 22, 23, 24]);
    let s = batch.slice(1, 2);
    assert_eq!(s.batch, 2);
    assert_eq!(s.row_inputs(0), batch.row_inputs(1));
    assert_eq!(s.row_targets(1), batch.row_targets(2));
}

#[test]
fn copy_task_is_constructive() {
    let task = synthetic_copy_task(6, 12, 9, 4).unwrap();
    assert_eq!(task.first_copy_position(), 6);
    for step in 0..5 {
        let b = task.batch_at(step);
        for r in 0..6 {
            let x = b.row_inputs(r);
            for t in 0..6 {
                assert_eq!(x[t + 6], x[t]);
            }
            assert!(x.iter().all(|&v| v < 9));
            assert_eq!(b.row_targets(r)[11], x[0]);
        }
    }
    assert_eq!(task.batch_at(3), task.batch_at(3));
    assert_ne!(task.batch_at(3), task.batch_at(4));
    assert_ne!(task.eval_batch(0).unwrap().unwrap(), task.batch_at(0));
}

#[test]
fn copy_task_rejects_odd_lengths() {
    assert!(synthetic_copy_task(2, 7, 5, 0).is_err());
    assert!(synthetic_copy_task(2, 0, 5, 0).is_err());
    assert!(synthetic_copy_task(2, 8, 1, 0).is_err());
}

proptest! {
    #[test]
    fn sampled_windows_shift_by_one_and_stay_in_train(seed in any::<u64>(), step in any::<u64>(), t in 1usize..40) {
        let c = Corpus::from_bytes(&text(3000)).unwrap();
        let b = batch_sampler(&c, 5, t, seed, step).unwrap();
        let train: Vec<usize> = c.train().iter().map(|&x| x as usize).collect();
        for r in 0..5 {
            let (x, y) = (b.row_inputs(r), b.row_targets(r));
            prop_assert_eq!(&x[1..], &y[..t - 1]);
            let start = train.windows(t + 1).position(|w| w[..t] == *x && w[t] == y[t - 1]);
            prop_assert!(start.is_some());
        }
    }

    #[test]
    fn eval_windows_stay_in_eval(index in 0usize..50, t in 1usize..20) {
        let c = Corpus::from_bytes(&text(5000)).unwrap();
        let b = eval_batch(&c, 4, t, index).unwrap();
        let eval: Vec<usize> = c.eval().iter().map(|&x| x as usize).collect();
        for r in 0..4 {
            let (x, y) = (b.row_inputs(r), b.row_targets(r));
            let found = eval.windows(t + 1).any(|w| w[..t] == *x && w[t] == y[t - 1]);
            prop_assert!(found);
        }
    }
}
