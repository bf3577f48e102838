//! Slow reference implementations of the ROUGE scores.

use softpipe::tasks::Token;

fn strip(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().copied().filter(|&t| t >= 8).collect()
}

fn f1(overlap: usize, n_pred: usize, n_ref: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_pred as f64;
    let r = overlap as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

fn grams(tokens: &[Token], n: usize) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

pub fn rouge_n(pred: &[Token], reference: &[Token], n: usize) -> f64 {
    let pg = grams(&strip(pred), n);
    let mut rg = grams(&strip(reference), n);
    let (n_pred, n_ref) = (pg.len(), rg.len());
    let mut overlap = 0;
    for g in &pg {
        if let Some(pos) = rg.iter().position(|r| r == g) {
            rg.remove(pos);
            overlap += 1;
        }
    }
    f1(overlap, n_pred, n_ref)
}

fn is_subsequence(needle: &[Token], hay: &[Token]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|t| it.any(|h| h == t))
}

pub fn rouge_l(pred: &[Token], reference: &[Token]) -> f64 {
    let (p, r) = (strip(pred), strip(reference));
    let mut best = 0;
    for mask in 0u32..(1 << p.len()) {
        let sub: Vec<Token> = (0..p.len()).filter(|i| mask >> i & 1 == 1).map(|i| p[i]).collect();
        if sub.len() > best && is_subsequence(&sub, &r) {
            best = sub.len();
        }
    }
    f1(best, p.len(), r.len())
}
