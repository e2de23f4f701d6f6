use crate::text::is_punctuation;

use super::{MetricError, Result};

const SENTENCE_END: [&str; 3] = [".", "!", "?"];

/// Maximal runs of `aeiouy`, minus one for a final silent "e" (but not
/// "-le"), at least 1.
pub fn syllables(word: &str) -> usize {
    let w = word.to_lowercase();
    let mut groups: usize = 0;
    let mut in_vowel = false;
    for ch in w.chars() {
        let v = matches!(ch, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
        if v && !in_vowel {
            groups += 1;
        }
        in_vowel = v;
    }
    if w.ends_with('e') && !w.ends_with("le") {
        groups = groups.saturating_sub(1);
    }
    groups.max(1)
}

/// Sentence count of one tokenised line: one per `.`/`!`/`?` token plus a
/// trailing unterminated segment, at least 1.
pub fn sentence_count<S: AsRef<str>>(tokens: &[S]) -> usize {
    let mut count = 0;
    let mut open = false;
    for t in tokens {
        if SENTENCE_END.contains(&t.as_ref()) {
            if open {
                count += 1;
            }
            open = false;
        } else if !is_punctuation(t.as_ref()) {
            open = true;
        }
    }
    (count + usize::from(open)).max(1)
}

/// `0.39·words/sentences + 11.8·syllables/words − 15.59` over all lines.
pub fn fk_grade<S: AsRef<str>>(lines: &[Vec<S>]) -> Result<f64> {
    let (mut words, mut syl, mut sents) = (0usize, 0usize, 0usize);
    for line in lines {
        for t in line.iter().map(AsRef::as_ref).filter(|t| !is_punctuation(t)) {
            words += 1;
            syl += syllables(t);
        }
        sents += sentence_count(line);
    }
    if words == 0 {
        return Err(MetricError::NoWords);
    }
    let w = words as f64;
    Ok(0.39 * w / sents as f64 + 11.8 * syl as f64 / w - 15.59)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn syllable_heuristic() {
        for (w, n) in [
            ("the", 1),
            ("cat", 1),
            ("table", 2),
            ("make", 1),
            ("simplification", 5),
            ("rhythm", 1),
            ("queue", 1),
            ("people", 2),
            ("1980s", 1),
            ("beautiful", 3),
        ] {
            assert_eq!(syllables(w), n, "{w}");
        }
    }

    #[test]
    fn cat_sat() {
        let g = fk_grade(&[t("the cat sat .")]).unwrap();
        assert!((g - (0.39 * 3.0 + 11.8 - 15.59)).abs() < 1e-12);
        assert!((g + 2.62).abs() < 1e-12);
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(sentence_count(&t("a b . c d ! e")), 3);
        assert_eq!(sentence_count(&t(". .")), 1);
        assert_eq!(sentence_count(&t("a , b")), 1);
        assert_eq!(sentence_count(&t("a . . b ?")), 2);
    }

    #[test]
    fn duplication_and_monotonicity() {
        let one = fk_grade(&[t("the cat sat on the mat .")]).unwrap();
        let two = fk_grade(&[t("the cat sat on the mat ."), t("the cat sat on the mat .")]).unwrap();
        assert!((one - two).abs() < 1e-12);
        let longer = fk_grade(&[t("the caterpillar sat on the mat .")]).unwrap();
        assert!(longer > one);
        let commas = fk_grade(&[t("the cat , sat on the mat \" .")]).unwrap();
        assert!((one - commas).abs() < 1e-12);
        let bang = fk_grade(&[t("the cat sat on the mat !")]).unwrap();
        assert_eq!(one, bang);
    }

    #[test]
    fn no_words() {
        assert_eq!(fk_grade(&[t(". ,")]).unwrap_err(), MetricError::NoWords);
        assert_eq!(fk_grade::<String>(&[]).unwrap_err(), MetricError::NoWords);
    }
}
