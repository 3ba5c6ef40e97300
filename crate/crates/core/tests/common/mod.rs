//! Independent oracles shared by the integration tests. Everything here is
//! written against the mathematical definitions, not against the library's
//! algorithms: the accountant oracle evaluates the moment sum directly in
//! high-precision fixed-point arithmetic, and the transport oracles solve the
//! assignment problem by brute force.

#![allow(dead_code)]

use num_bigint::{BigInt, BigUint, Sign};

/// Fraction bits used by the fixed-point accountant oracle. The error budget
/// (Taylor truncation, ~12 squarings, and the log series) stays far below
/// 2^-300, leaving hundreds of bits of headroom over the 1e-10 comparisons.
pub const FRAC_BITS: usize = 330;

/// Exact dyadic decomposition of a positive finite f64: `x = num / 2^shift`.
/// Every finite f64 is such a rational, so this loses nothing.
pub fn dyadic(x: f64) -> (BigUint, usize) {
    assert!(x.is_finite() && x > 0.0, "dyadic() needs a positive finite value, got {x}");
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, e) = if exp_field == 0 {
        (frac, -1074i64)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    if e >= 0 {
        (BigUint::from(mantissa) << e as usize, 0)
    } else {
        (BigUint::from(mantissa), (-e) as usize)
    }
}

/// `e^(xn / 2^xs)` scaled by `2^f`, for a non-negative dyadic argument.
/// Argument reduction by repeated halving until the argument is below 1/2,
/// a positive-term Taylor series at full precision, then repeated squaring.
pub fn exp_fixed(xn: &BigUint, xs: usize, f: usize) -> BigUint {
    let bits = xn.bits() as i64;
    let m = (bits - xs as i64 + 1).max(0) as usize;
    let shift = xs + m;
    let mut sum = BigUint::from(1u32) << f;
    let mut term = sum.clone();
    let mut j = 1u64;
    loop {
        term = (&term * xn) >> shift;
        term /= BigUint::from(j);
        if term == BigUint::from(0u32) {
            break;
        }
        sum += &term;
        j += 1;
    }
    for _ in 0..m {
        sum = (&sum * &sum) >> f;
    }
    sum
}

/// `2 * atanh(u)` scaled by `2^f`, where `u = u_fixed / 2^f` and `0 <= u < 1/2`.
fn two_atanh_fixed(u_fixed: &BigUint, f: usize) -> BigUint {
    let u2 = (u_fixed * u_fixed) >> f;
    let mut term = u_fixed.clone();
    let mut sum = BigUint::from(0u32);
    let mut j = 0u64;
    loop {
        let contrib = &term / BigUint::from(2 * j + 1);
        if contrib == BigUint::from(0u32) {
            break;
        }
        sum += contrib;
        term = (&term * &u2) >> f;
        j += 1;
    }
    sum << 1
}

/// `ln 2` scaled by `2^f`, via `ln 2 = 2 atanh(1/3)`.
pub fn ln2_fixed(f: usize) -> BigUint {
    let third = (BigUint::from(1u32) << f) / BigUint::from(3u32);
    two_atanh_fixed(&third, f)
}

/// `ln m` scaled by `2^f` for a mantissa `m = m_fixed / 2^f` in `[1, 2)`,
/// via `ln m = 2 atanh((m-1)/(m+1))`.
pub fn ln_mantissa_fixed(m_fixed: &BigUint, f: usize) -> BigUint {
    let one = BigUint::from(1u32) << f;
    assert!(*m_fixed >= one && *m_fixed < (&one << 1), "mantissa out of [1,2)");
    let num = m_fixed - &one;
    if num == BigUint::from(0u32) {
        return num;
    }
    let den = m_fixed + &one;
    let u = (num << f) / den;
    two_atanh_fixed(&u, f)
}

/// Truncating conversion of `v / 2^f` to f64 (top 53 bits of the value).
pub fn fixed_to_f64(v: &BigUint, f: usize) -> f64 {
    let bits = v.bits();
    if bits == 0 {
        return 0.0;
    }
    let (mant, shift) = if bits > 53 {
        (v >> (bits - 53) as usize, bits as i64 - 53)
    } else {
        (v.clone(), 0)
    };
    let m = mant.to_u64_digits().first().copied().unwrap_or(0);
    (m as f64) * 2f64.powi((shift - f as i64) as i32)
}

/// Direct-sum oracle for the per-step Renyi divergence of the Poisson
/// subsampled Gaussian mechanism at integer order `alpha`:
///
/// ```text
/// rdp = ln( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k e^(k(k-1)/(2 sigma^2)) ) / (alpha-1)
/// ```
///
/// `q` and `1/(2 sigma^2)` are taken at their exact dyadic f64 values, the
/// binomial weights are exact integers over the common denominator
/// `2^(qs * alpha)`, and each exponential carries > 300 correct bits, so the
/// sum is evaluated without any floating-point rounding or overflow. This is
/// the plain definition summed term by term - no log-sum-exp, no expm1/ln1p
/// rearrangement - which makes it an independent check of the library's
/// log-space evaluation.
pub fn oracle_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    assert!(alpha >= 2, "oracle needs alpha >= 2");
    assert!(q > 0.0 && q <= 1.0, "oracle needs q in (0, 1]");
    assert!(sigma > 0.0, "oracle needs sigma > 0");
    let f = FRAC_BITS;
    let (qn, qs) = dyadic(q);
    let (gn, gs) = dyadic(1.0 / (2.0 * sigma * sigma));

    // e^(k(k-1)/(2 sigma^2)) for k = 0..=alpha, each scaled by 2^f.
    let e_k: Vec<BigUint> = (0..=alpha as u64)
        .map(|k| exp_fixed(&(&gn * BigUint::from(k * k.saturating_sub(1))), gs, f))
        .collect();

    // sum_k C(alpha,k) ((1-q) 2^qs)^(alpha-k) (q 2^qs)^k e_k  =  S * 2^(f + qs*alpha)
    let one_minus_q_num = (BigUint::from(1u32) << qs) - &qn;
    let mut s = BigUint::from(0u32);
    let mut binom = BigUint::from(1u32);
    for k in 0..=alpha {
        if k > 0 {
            binom = binom * BigUint::from(alpha - k + 1) / BigUint::from(k);
        }
        let w = &binom * one_minus_q_num.pow(alpha - k) * qn.pow(k);
        s += w * &e_k[k as usize];
    }

    // ln S = ln(s) - (f + qs*alpha) ln 2, with ln(s) = t ln 2 + ln(mantissa).
    let t = s.bits() as i64 - 1;
    let m_fixed = if t >= f as i64 { &s >> (t as usize - f) } else { &s << (f - t as usize) };
    let ln2 = ln2_fixed(f);
    let scale = BigUint::from(f as u64 + qs as u64 * alpha as u64);
    let ln_s = BigInt::from(ln_mantissa_fixed(&m_fixed, f)) + BigInt::from(t) * BigInt::from(ln2.clone())
        - BigInt::from(scale * ln2);
    assert!(ln_s.sign() != Sign::Minus, "moment sum must be >= 1");
    let rdp_fixed = ln_s.magnitude() / BigUint::from(alpha - 1);
    fixed_to_f64(&rdp_fixed, f)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn expand(xs: &[f64], l: usize) -> Vec<f64> {
    let reps = l / xs.len();
    xs.iter().flat_map(|&v| std::iter::repeat(v).take(reps)).collect()
}

/// W1 between empirical distributions by expanding both samples to the least
/// common size and matching sorted order - the textbook quantile coupling.
pub fn lcm_sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    let l = lcm(a.len(), b.len());
    let mut ea = expand(a, l);
    let mut eb = expand(b, l);
    ea.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).sum::<f64>() / l as f64
}

/// W1 as the exact optimal-assignment cost: expand to the least common size
/// and minimize the mean |a_i - b_perm(i)| over every permutation. This never
/// assumes the sorted matching is optimal, so it independently certifies the
/// quantile formula. Only feasible for expanded sizes <= 8.
pub fn assignment_w1(a: &[f64], b: &[f64]) -> f64 {
    let l = lcm(a.len(), b.len());
    assert!(l <= 8, "assignment oracle is factorial in the expanded size ({l})");
    let ea = expand(a, l);
    let eb = expand(b, l);
    let mut idx: Vec<usize> = (0..l).collect();
    let mut best = f64::INFINITY;
    permute(&mut idx, 0, &mut |perm| {
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| (ea[i] - eb[j]).abs()).sum();
        if cost < best {
            best = cost;
        }
    });
    best / l as f64
}

fn permute(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        visit(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, visit);
        idx.swap(k, i);
    }
}
