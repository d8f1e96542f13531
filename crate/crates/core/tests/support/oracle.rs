//! Brute-force reference implementations of the lexical metrics. Kept
//! deliberately naive and independent of the library's counting code.

#![allow(dead_code)]

pub fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for start in 0..=tokens.len() - n {
        let mut g = Vec::new();
        for k in 0..n {
            g.push(tokens[start + k].clone());
        }
        out.push(g);
    }
    out
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    let mut c = 0;
    for x in list {
        if x.as_slice() == g {
            c += 1;
        }
    }
    c
}

/// Clipped matches, counting each distinct predicted n-gram once.
pub fn clipped_matches(pred: &[String], reference: &[String], n: usize) -> usize {
    let p = ngrams(pred, n);
    let r = ngrams(reference, n);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut total = 0;
    for g in &p {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        total += occurrences(&p, g).min(occurrences(&r, g));
    }
    total
}

pub fn bleu3(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let orders = if pred.len() < 3 { pred.len() } else { 3 };
    let mut product = 1.0f64;
    for n in 1..=orders {
        let total = ngrams(pred, n).len() as f64;
        let m = clipped_matches(pred, reference, n) as f64;
        if m == 0.0 && n == 1 {
            return 0.0;
        }
        let p = if m == 0.0 { 1e-9 / total } else { m / total };
        product *= p;
    }
    let geo = product.powf(1.0 / orders as f64);
    let c = pred.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * geo
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut j = 0;
    for t in hay {
        if j < needle.len() && &needle[j] == t {
            j += 1;
        }
    }
    j == needle.len()
}

/// LCS by enumerating every subsequence of the shorter side.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "brute-force LCS limited to short inputs");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let sub: Vec<String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i].clone()).collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

fn f(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

pub fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let np = ngrams(pred, n).len();
    let nr = ngrams(reference, n).len();
    if np == 0 && nr == 0 {
        return if pred == reference { 1.0 } else { 0.0 };
    }
    if np == 0 || nr == 0 {
        return 0.0;
    }
    let m = clipped_matches(pred, reference, n) as f64;
    f(m / np as f64, m / nr as f64)
}

pub fn rouge_l(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(pred, reference) as f64;
    f(l / pred.len() as f64, l / reference.len() as f64)
}
