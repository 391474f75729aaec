#![allow(dead_code, unused_macros, clippy::needless_range_loop, clippy::too_many_arguments)]

use tpamtl::data::EpisodeBatch;
use tpamtl::diffcore::{ParamStore, RngStream};

/// Random instances with uniform features, random labels and roughly
/// `label_rate` of the labels observed. `lengths` pads instances shorter
/// than `steps`.
pub fn random_batch(
    seed: u64,
    n: usize,
    steps: usize,
    m: usize,
    dn: usize,
    lengths: Option<&[usize]>,
    label_rate: f64,
) -> EpisodeBatch {
    let mut rng = RngStream::new(seed);
    let lengths: Vec<usize> = match lengths {
        Some(l) => l.to_vec(),
        None => vec![steps; n],
    };
    let mut inputs = vec![0.0; n * steps * m];
    for b in 0..n {
        for t in 0..lengths[b] {
            for f in 0..m {
                inputs[(b * steps + t) * m + f] = rng.uniform_range(-1.0, 1.0);
            }
        }
    }
    let labels = (0..n * dn).map(|_| f64::from(u8::from(rng.bernoulli(0.5)))).collect();
    let mask = (0..n * dn).map(|_| rng.bernoulli(label_rate)).collect();
    EpisodeBatch::new(
        (0..n).map(|b| format!("i{b}")).collect(),
        m,
        dn,
        steps,
        inputs,
        lengths,
        labels,
        mask,
    )
    .unwrap()
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = RngStream::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.uniform_range(-scale, scale);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Wraps plain check functions as tests and lists them in `ACCEPTANCE` for
/// the acceptance runner.
macro_rules! acceptance_checks {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const ACCEPTANCE: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        mod checks {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}
