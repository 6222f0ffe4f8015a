//! Word-level segmentation shared by the tokenizer and the relation parser.

use alloc::string::String;
use alloc::vec::Vec;

fn fold_char(c: char) -> char {
    match c {
        '²' => '2',
        '³' => '3',
        '–' | '—' | '−' => '-',
        '’' | '‘' => '\'',
        _ => c,
    }
}

/// Lowercases and splits `text` into words. Alphanumeric runs form one word;
/// a `.` between two digits stays inside the word (`18.5`); every other
/// non-space character becomes its own token. `>=`/`<=` fold to `≥`/`≤`.
pub fn lex(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().map(fold_char).collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if c == '.'
            && !cur.is_empty()
            && cur.chars().last().is_some_and(|p| p.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
        {
            cur.push('.');
        } else {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                let next_eq = chars.get(i + 1) == Some(&'=');
                match c {
                    '>' if next_eq => {
                        out.push(String::from("≥"));
                        i += 1;
                    }
                    '<' if next_eq => {
                        out.push(String::from("≤"));
                        i += 1;
                    }
                    _ => out.push(String::from(c)),
                }
            }
        }
        i += 1;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Joins words back into normalized text.
pub fn join<S: AsRef<str>>(words: &[S]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(w.as_ref());
    }
    s
}

/// `lex` followed by `join`.
pub fn normalize(text: &str) -> String {
    join(&lex(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_but_keeps_decimals() {
        assert_eq!(lex("BMI 18.5-29.9 kg/m²"), ["bmi", "18.5", "-", "29.9", "kg", "/", "m2"]);
        assert_eq!(lex("QTc>=450 ms."), ["qtc", "≥", "450", "ms", "."]);
        assert_eq!(lex("  "), Vec::<String>::new());
        assert_eq!(normalize("Heart failure (NYHA class III and IV)"), "heart failure ( nyha class iii and iv )");
    }

    #[test]
    fn trailing_period_is_not_a_decimal() {
        assert_eq!(lex("at least 18."), ["at", "least", "18", "."]);
    }
}
