//! Single-pass `{name}` slot filling.

/// Replaces each `{name}` slot in `template` with its value. Substituted
/// values are never rescanned, and unknown `{...}` runs are left as-is.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in slots {
            let token_len = name.len() + 2;
            if tail.len() >= token_len
                && tail.as_bytes()[token_len - 1] == b'}'
                && &tail[1..token_len - 1] == *name
            {
                out.push_str(value);
                rest = &tail[token_len..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::fill;

    #[test]
    fn fills_without_rescanning() {
        assert_eq!(fill("{a} and {b}", &[("a", "{b}"), ("b", "2")]), "{b} and 2");
        assert_eq!(fill("{\"k\": \"{a}\"}", &[("a", "v")]), "{\"k\": \"v\"}");
        assert_eq!(fill("{", &[("a", "v")]), "{");
        assert_eq!(fill("ünï{a}", &[("a", "ç")]), "ünïç");
    }
}
