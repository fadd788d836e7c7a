const PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '(', ')', '[', ']', '{', '}', '"', '\'', '/', '\\',
];

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
/// Hyphens inside a word are kept; leading or trailing ones are stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if PUNCTUATION.contains(&c) { ' ' } else { c })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn complaint_from_fever_visit() {
        assert_eq!(
            tokenize("fever, ili, right-sided abdominal pain"),
            vec!["fever", "ili", "right-sided", "abdominal", "pain"]
        );
    }

    #[test]
    fn empty_and_shouting() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ,;  ").is_empty());
        assert_eq!(tokenize("CHEST PAIN!!!"), vec!["chest", "pain"]);
    }

    #[test]
    fn stray_hyphens_and_slashes() {
        assert_eq!(tokenize("s/p fall - hip"), vec!["s", "p", "fall", "hip"]);
        assert_eq!(tokenize("--abd--pain"), vec!["abd--pain"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_own_output(text in "[ -~]{0,40}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
