use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use threepath::txn::{SharedWord, TxnConfig, TxnContext};

fn transactions(c: &mut Criterion) {
    let words: Vec<SharedWord> = (0..64).map(SharedWord::new).collect();
    let mut ctx = TxnContext::new(&TxnConfig::default(), 0);
    let mut g = c.benchmark_group("txn");
    for n in [1usize, 8, 32] {
        g.bench_with_input(BenchmarkId::new("read", n), &n, |b, &n| {
            b.iter(|| {
                ctx.execute(|t| {
                    let mut s = 0;
                    for w in &words[..n] {
                        s += t.read(w)?;
                    }
                    Ok(s)
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("read_write", n), &n, |b, &n| {
            b.iter(|| {
                ctx.execute(|t| {
                    for w in &words[..n] {
                        let v = t.read(w)?;
                        t.write(w, v + 1)?;
                    }
                    Ok(())
                })
            })
        });
    }
    g.finish();
}

fn plain_words(c: &mut Criterion) {
    let w = SharedWord::new(0);
    c.bench_function("word/load", |b| b.iter(|| w.load()));
    c.bench_function("word/store", |b| b.iter(|| w.store(1)));
    c.bench_function("word/cas", |b| {
        b.iter(|| {
            let v = w.load();
            w.compare_exchange(v, v + 1)
        })
    });
}

criterion_group!(benches, transactions, plain_words);
criterion_main!(benches);
