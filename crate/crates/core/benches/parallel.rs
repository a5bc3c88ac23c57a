use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stoei::audio::{self, RawAudio};
use stoei::par;
use stoei::scorer;
use stoei::{OpinionSpan, Polarity, SpanSet};

fn corpus(n: usize, seed: u64) -> Vec<(SpanSet, SpanSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = |rng: &mut ChaCha8Rng| -> SpanSet {
        (0..rng.random_range(0..4))
            .map(|i| {
                let start = i * 6 + rng.random_range(0..3);
                let pol = if rng.random_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
                OpinionSpan::new(start, start + rng.random_range(1..4), pol)
            })
            .collect()
    };
    (0..n).map(|_| (spans(&mut rng), spans(&mut rng))).collect()
}

fn clips(n: usize) -> Vec<RawAudio> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..n)
        .map(|_| RawAudio {
            samples: (0..audio::SAMPLE_RATE as usize * 2).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sample_rate: audio::SAMPLE_RATE,
        })
        .collect()
}

fn bench_mel(c: &mut Criterion) {
    let items = clips(16);
    let mut g = c.benchmark_group("log_mel_16_clips");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("par", 16), |b| {
        b.iter(|| par::map(&items, |a| audio::log_mel(a, audio::N_MELS).unwrap()))
    });
    g.bench_function(BenchmarkId::new("seq", 16), |b| {
        b.iter(|| par::map_seq(&items, |a| audio::log_mel(a, audio::N_MELS).unwrap()))
    });
    g.finish();
}

fn bench_score(c: &mut Criterion) {
    let pairs = corpus(20_000, 1);
    let chunks: Vec<&[(SpanSet, SpanSet)]> = pairs.chunks(256).collect();
    let mut g = c.benchmark_group("score_20k_pairs");
    g.bench_function("par", |b| b.iter(|| par::map(&chunks, |c| scorer::oracle_score(c).tp)));
    g.bench_function("seq", |b| b.iter(|| par::map_seq(&chunks, |c| scorer::oracle_score(c).tp)));
    g.finish();
}

criterion_group!(benches, bench_mel, bench_score);
criterion_main!(benches);
