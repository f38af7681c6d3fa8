use ndarray::Array2;

use crate::C64;

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Largest entrywise modulus of `U†U − I`.
pub(crate) fn unitarity_error(u: &Array2<C64>) -> f64 {
    let n = u.nrows();
    let prod = u.t().mapv(|z| z.conj()).dot(u);
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            };
            worst = worst.max((prod[[i, j]] - target).norm());
        }
    }
    worst
}

/// SplitMix64 finalizer; used to derive independent run seeds.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}


/// Matrix exponential by scaling and squaring of a Taylor series. Test oracle only.
#[cfg(test)]
pub(crate) fn expm(a: &Array2<C64>) -> Array2<C64> {
    let norm: f64 = a.iter().map(|x| x.norm()).sum();
    let squarings = norm.max(1.0).log2().ceil() as i32 + 4;
    let scaled = a.mapv(|z| z / 2f64.powi(squarings));
    let n = a.nrows();
    let mut result = Array2::<C64>::eye(n);
    let mut term = Array2::<C64>::eye(n);
    for k in 1..30 {
        term = term.dot(&scaled).mapv(|z| z / k as f64);
        result = result + &term;
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}
