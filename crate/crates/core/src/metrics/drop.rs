//! DROP-style numeracy-aware token F1.
//!
//! Normalization, applied per token after splitting on spaces and hyphens:
//!
//! | step | rule |
//! |------|------|
//! | case | lowercase |
//! | punctuation | ASCII punctuation removed unless the token parses as a number |
//! | numbers | tokens parsing as a float are rewritten in canonical decimal form (`1305` → `1305.0`) |
//! | articles | `a`, `an`, `the` removed |
//! | whitespace | collapsed; empty tokens dropped |
//!
//! Currency symbols and thousands separators are punctuation, so `$1,305`
//! becomes `1305.0`. Each span becomes a token *set*. A pair of spans scores
//! zero when the gold span contains numbers and the prediction shares none of
//! them. Answers written as bracketed lists (`['a', 'b']`) are multi-span;
//! gold and predicted spans are aligned one-to-one to maximize total F1, and
//! the score is the mean over `max(#gold, #predicted)` slots. Alignment is
//! exhaustive up to six spans and greedy beyond.

use std::collections::BTreeSet;

const MAX_EXHAUSTIVE_SPANS: usize = 6;

fn is_number(token: &str) -> bool {
    !token.is_empty() && token.parse::<f64>().is_ok()
}

/// Canonical decimal text for a float, e.g. `1305.0`, `0.6`, `1e+16`.
fn canonical_number(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let a = x.abs();
    if a != 0.0 && !(1e-4..1e16).contains(&a) {
        let s = format!("{x:e}");
        let (mantissa, exp) = s.split_once('e').expect("exponent form");
        let exp: i32 = exp.parse().expect("integer exponent");
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    if x.fract() == 0.0 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

fn normalize_token(token: &str) -> String {
    let lower = token.to_lowercase();
    let no_punc = if is_number(&lower) {
        lower
    } else {
        lower.chars().filter(|c| !c.is_ascii_punctuation()).collect()
    };
    let fixed = if is_number(&no_punc) {
        canonical_number(no_punc.parse().expect("checked numeric"))
    } else {
        no_punc
    };
    let words: Vec<&str> = fixed
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect();
    words.join(" ")
}

/// Normalized form of one span.
pub fn normalize_answer(text: &str) -> String {
    text.split([' ', '-'])
        .map(normalize_token)
        .filter(|p| !p.trim().is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a bracketed list of quoted strings into its elements. Anything
/// else is a single span.
pub fn answer_spans(text: &str) -> Vec<String> {
    parse_bracketed(text.trim()).unwrap_or_else(|| vec![text.to_string()])
}

fn parse_bracketed(text: &str) -> Option<Vec<String>> {
    let inner = text.strip_prefix('[')?.strip_suffix(']')?;
    let mut spans = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let quote = match chars.next() {
            None => break,
            Some(q @ ('\'' | '"')) => q,
            Some(_) => return None,
        };
        let mut span = String::new();
        loop {
            match chars.next()? {
                '\\' => span.push(chars.next()?),
                c if c == quote => break,
                c => span.push(c),
            }
        }
        spans.push(span);
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(_) => return None,
        }
    }
    if spans.is_empty() {
        None
    } else {
        Some(spans)
    }
}

type Bag = BTreeSet<String>;

fn bag(span: &str) -> Bag {
    normalize_answer(span)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn bag_f1(pred: &Bag, gold: &Bag) -> f64 {
    let inter = gold.intersection(pred).count() as f64;
    let precision = if pred.is_empty() { 1.0 } else { inter / pred.len() as f64 };
    let recall = if gold.is_empty() { 1.0 } else { inter / gold.len() as f64 };
    if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn numbers_match(gold: &Bag, pred: &Bag) -> bool {
    let gold_numbers: Vec<&String> = gold.iter().filter(|w| is_number(w)).collect();
    gold_numbers.is_empty() || gold_numbers.iter().any(|n| pred.contains(*n))
}

/// Best total score of a one-to-one assignment between rows and columns.
fn best_assignment(scores: &[Vec<f64>]) -> f64 {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows.max(cols) <= MAX_EXHAUSTIVE_SPANS {
        let mut used = vec![false; cols];
        exhaustive(scores, 0, &mut used)
    } else {
        greedy(scores)
    }
}

fn exhaustive(scores: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
    if row == scores.len() {
        return 0.0;
    }
    // a row may also stay unassigned when there are more rows than columns
    let mut best = if scores.len() > used.len() {
        exhaustive(scores, row + 1, used)
    } else {
        f64::NEG_INFINITY
    };
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.max(scores[row][c] + exhaustive(scores, row + 1, used));
            used[c] = false;
        }
    }
    if best == f64::NEG_INFINITY {
        0.0
    } else {
        best
    }
}

fn greedy(scores: &[Vec<f64>]) -> f64 {
    let mut cells: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &s)| (s, r, c)))
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; scores.len()];
    let mut col_used = vec![false; scores[0].len()];
    let mut total = 0.0;
    for (s, r, c) in cells {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            total += s;
        }
    }
    total
}

/// DROP F1 between a prediction and a gold answer, in `[0, 1]`.
pub fn drop_f1(prediction: &str, gold: &str) -> f64 {
    let pred: Vec<Bag> = answer_spans(prediction).iter().map(|s| bag(s)).collect();
    let gold: Vec<Bag> = answer_spans(gold).iter().map(|s| bag(s)).collect();
    let scores: Vec<Vec<f64>> = gold
        .iter()
        .map(|g| {
            pred.iter()
                .map(|p| if numbers_match(g, p) { bag_f1(p, g) } else { 0.0 })
                .collect()
        })
        .collect();
    best_assignment(&scores) / gold.len().max(pred.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_table() {
        assert_eq!(normalize_answer("$1,305"), "1305.0");
        assert_eq!(normalize_answer("The Pension."), "pension");
        assert_eq!(normalize_answer("0.6/5.1"), "651.0");
        assert_eq!(normalize_answer("11.76"), "11.76");
        assert_eq!(normalize_answer("twenty-one"), "twenty one");
        assert_eq!(normalize_answer("$(39,145)"), "39145.0");
    }

    #[test]
    fn canonical_numbers_follow_decimal_repr() {
        assert_eq!(canonical_number(1305.0), "1305.0");
        assert_eq!(canonical_number(0.6), "0.6");
        assert_eq!(canonical_number(1e16), "1e+16");
        assert_eq!(canonical_number(0.00001), "1e-05");
    }

    #[test]
    fn span_parsing() {
        assert_eq!(answer_spans("['$5.1 million', '$0.6 million']"), vec!["$5.1 million", "$0.6 million"]);
        assert_eq!(answer_spans("[\"it's\"]"), vec!["it's"]);
        assert_eq!(answer_spans("[not a list]"), vec!["[not a list]"]);
        assert_eq!(answer_spans("plain"), vec!["plain"]);
    }

    #[test]
    fn reference_examples() {
        assert_eq!(drop_f1("$1,305", "$1,305"), 1.0);
        assert_eq!(drop_f1("$909", "$1,305"), 0.0);
        assert_eq!(
            drop_f1("['$0.6 million', '$5.1 million']", "['$5.1 million', '$0.6 million']"),
            1.0
        );
        assert_eq!(drop_f1("", ""), 1.0);
        assert_eq!(drop_f1("", "x"), 0.0);
    }

    #[test]
    fn greedy_used_beyond_six_spans() {
        let gold: Vec<String> = (0..8).map(|i| format!("'item {i}'")).collect();
        let list = format!("[{}]", gold.join(", "));
        assert_eq!(drop_f1(&list, &list), 1.0);
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(a in "[a-z0-9 $,.]{0,20}", b in "[a-z0-9 $,.]{0,20}") {
            let ab = drop_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ba_tokens = bag(&a) == bag(&b);
            if ba_tokens { prop_assert_eq!(ab, 1.0); }
            // the numbers rule is asymmetric, so symmetry is only claimed without numbers
            let has_num = bag(&a).iter().chain(bag(&b).iter()).any(|w| is_number(w));
            if !has_num { prop_assert!((ab - drop_f1(&b, &a)).abs() < 1e-12); }
        }

        #[test]
        fn one_iff_bags_equal(a in "[a-z ]{0,12}", b in "[a-z ]{0,12}") {
            prop_assert_eq!(drop_f1(&a, &b) == 1.0, bag(&a) == bag(&b));
        }
    }
}
