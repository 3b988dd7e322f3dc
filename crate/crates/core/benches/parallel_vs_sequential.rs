//! Rayon data-parallel paths against the sequential fallback on the three
//! hot loops: a training step, retrieval scoring and corpus synthesis.
//!
//! `cargo bench -p kwsnet-core` (build with `--no-default-features` to drop
//! rayon entirely).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kwsnet_core::encoders::{Modality, ModelConfig, StreamInput};
use kwsnet_core::evalharness::{compute_traces, eval_streams, make_queries};
use kwsnet_core::gradcore::Graph;
use kwsnet_core::kwsnet::{batch_loss, KwsNet};
use kwsnet_core::par;
use kwsnet_core::pronlex::Lexicon;
use kwsnet_core::synthcorpus::{build_corpus, plan_vocabulary, CorpusSpec, VocabSpec};
use kwsnet_core::trainer::{build_batch, index_pairs, stream_of};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_specs() -> (VocabSpec, CorpusSpec) {
    let v = VocabSpec {
        train_keywords: 30,
        val_keywords: 4,
        test_keywords: 8,
        test_short: 4,
        ..Default::default()
    };
    let c = CorpusSpec {
        pretrain_clips: 0,
        train_clips: 40,
        val_clips: 4,
        test_clips: 24,
        probe_pairs: 0,
        ..Default::default()
    };
    (v, c)
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn benches(c: &mut Criterion) {
    let lex = Lexicon::bundled().unwrap();
    let (vs, cs) = small_specs();
    let plan = plan_vocabulary(&lex, &vs, 1).unwrap();
    let corpus = build_corpus(&lex, &plan, &cs, 1).unwrap();
    let model = KwsNet::new(ModelConfig {
        vocab_size: lex.vocab().len(),
        max_np: 40,
        ..Default::default()
    })
    .unwrap();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    let clips: Vec<_> = corpus.train.iter().take(8).collect();
    let batch = build_batch(&clips, &plan.train_keywords, &lex, 6, 40, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (kws, pairs) = index_pairs(&batch.pairs);
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| {
                let mut graph = Graph::new(&model.store, true);
                let inputs: Vec<StreamInput> = clips
                    .iter()
                    .map(|c| {
                        let x = stream_of(c, Modality::Visual);
                        StreamInput {
                            data: graph.tape.constant(x.clone()),
                            valid: x.shape()[0],
                        }
                    })
                    .collect();
                let mut w = 0;
                let out = batch_loss(&mut graph, &model.cfg, &inputs, &kws, &pairs, true, &mut w).unwrap();
                black_box(graph.tape.backward(out.loss));
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("retrieval_scoring");
    g.sample_size(10);
    let (queries, _) = make_queries(&plan.test_keywords, &lex, 40);
    let streams = eval_streams(&corpus.test, Modality::Visual, None, 0).unwrap();
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| black_box(compute_traces(&model, &streams, &queries).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("corpus_synthesis");
    g.sample_size(10);
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| black_box(build_corpus(&lex, &plan, &cs, 3).unwrap()))
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
