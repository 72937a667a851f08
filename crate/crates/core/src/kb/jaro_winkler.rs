//! Jaro and Jaro-Winkler string similarity.
//!
//! Both strings are lowercased before comparison. The Winkler boost uses the
//! standard scaling factor of 0.1 over a common prefix of at most four
//! characters and is applied unconditionally (no boost threshold).

const PREFIX_SCALE: f64 = 0.1;
const MAX_PREFIX: usize = 4;

fn fold(s: &str) -> Vec<char> {
    s.chars().flat_map(char::to_lowercase).collect()
}

fn jaro_chars(a: &[char], b: &[char]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);

    let mut b_taken = vec![false; b.len()];
    let mut a_matched = Vec::with_capacity(a.len());
    for (i, &ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_taken[j] && b[j] == ca {
                b_taken[j] = true;
                a_matched.push(ca);
                break;
            }
        }
    }
    let m = a_matched.len();
    if m == 0 {
        return 0.0;
    }
    let b_matched = b
        .iter()
        .zip(&b_taken)
        .filter_map(|(c, &taken)| taken.then_some(*c));
    let half_transpositions = a_matched
        .iter()
        .zip(b_matched)
        .filter(|(x, y)| *x != y)
        .count();
    let t = half_transpositions as f64 / 2.0;
    let m = m as f64;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

/// Jaro similarity in `[0, 1]`, case-insensitive.
pub fn jaro(a: &str, b: &str) -> f64 {
    jaro_chars(&fold(a), &fold(b))
}

/// Jaro-Winkler similarity in `[0, 1]`, case-insensitive.
pub fn jaro_winkler(a: &str, b: &str) -> f64 {
    let a = fold(a);
    let b = fold(b);
    let sim = jaro_chars(&a, &b);
    let prefix = a
        .iter()
        .zip(&b)
        .take(MAX_PREFIX)
        .take_while(|(x, y)| x == y)
        .count();
    let boosted = sim + prefix as f64 * PREFIX_SCALE * (1.0 - sim);
    boosted.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(jaro_winkler("Croatia", "Croatia"), 1.0);
        assert_eq!(jaro_winkler("abc", "xyz"), 0.0);
        assert_eq!(jaro_winkler("", ""), 1.0);
        assert_eq!(jaro_winkler("", "abc"), 0.0);
    }

    #[test]
    fn croatia_croatian() {
        // m = 7, t = 0: jaro = (1 + 7/8 + 1) / 3; prefix 4 gives jaro + 0.4 (1 - jaro)
        let jaro_expected = (1.0 + 7.0 / 8.0 + 1.0) / 3.0;
        assert!((jaro("Croatia", "Croatian") - jaro_expected).abs() < 1e-12);
        assert!((jaro_winkler("Croatia", "Croatian") - 0.975).abs() < 1e-4);
    }

    #[test]
    fn textbook_values() {
        // Classic pairs from the Jaro-Winkler literature.
        assert!((jaro("MARTHA", "MARHTA") - 0.944_444).abs() < 1e-6);
        assert!((jaro_winkler("MARTHA", "MARHTA") - 0.961_111).abs() < 1e-6);
        assert!((jaro_winkler("DIXON", "DICKSONX") - 0.813_333).abs() < 1e-6);
    }

    #[test]
    fn case_insensitive() {
        assert_eq!(jaro_winkler("OSLO", "oslo"), 1.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in "[a-eA-E ]{0,12}", b in "[a-eA-E ]{0,12}") {
            let ab = jaro_winkler(&a, &b);
            let ba = jaro_winkler(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let equal = a.to_lowercase() == b.to_lowercase();
            prop_assert_eq!(ab == 1.0, equal);
        }
    }
}
