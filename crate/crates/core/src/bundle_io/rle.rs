//! Text run-length encoding for binary masks.
//!
//! A mask is two lines: `H W`, then space-separated run lengths over the
//! row-major pixels. Runs alternate background/foreground and always start
//! with background, so a mask whose first pixel is set begins with a `0` run.

use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("bad run length {0:?}")]
    BadRun(String),
    #[error("runs cover {total} pixels but the mask has {expected}")]
    RleOverrun { expected: usize, total: usize },
    #[error("runs cover only {total} of {expected} pixels")]
    RleUnderrun { expected: usize, total: usize },
}

/// Run lengths for `mask`, leading with a (possibly zero) background run.
pub fn encode_runs(mask: &Mask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0usize;
    for &bit in mask.bits() {
        if bit != current {
            runs.push(count);
            count = 0;
            current = bit;
        }
        count += 1;
    }
    runs.push(count);
    runs
}

pub fn decode_runs(height: usize, width: usize, runs: &[usize]) -> Result<Mask, RleError> {
    let expected = height * width;
    let mut bits = Vec::with_capacity(expected);
    let mut value = false;
    let mut total = 0usize;
    for &run in runs {
        total = total.saturating_add(run);
        if total > expected {
            return Err(RleError::RleOverrun {
                expected,
                total: runs.iter().fold(0usize, |a, &r| a.saturating_add(r)),
            });
        }
        bits.extend(std::iter::repeat_n(value, run));
        value = !value;
    }
    if total < expected {
        return Err(RleError::RleUnderrun { expected, total });
    }
    Ok(Mask::from_bits(height, width, bits).expect("length checked above"))
}

pub fn format_header(mask: &Mask) -> String {
    format!("{} {}", mask.height(), mask.width())
}

pub fn format_runs(mask: &Mask) -> String {
    let runs = encode_runs(mask);
    let mut out = String::with_capacity(runs.len() * 4);
    for (i, r) in runs.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&r.to_string());
    }
    out
}

/// Both lines, newline-terminated.
pub fn to_text(mask: &Mask) -> String {
    format!("{}\n{}\n", format_header(mask), format_runs(mask))
}

pub fn parse_header(line: &str) -> Result<(usize, usize), RleError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let [h, w] = fields.as_slice() else {
        return Err(RleError::BadHeader(format!(
            "expected `H W`, found {line:?}"
        )));
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| RleError::BadHeader(format!("invalid extent {s:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn parse_runs(line: &str) -> Result<Vec<usize>, RleError> {
    if line.contains(';') {
        return Err(RleError::BadRun(line.to_string()));
    }
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| RleError::BadRun(tok.to_string()))
        })
        .collect()
}

/// Parses a two-line mask document. Blank trailing lines are ignored.
pub fn from_text(text: &str) -> Result<Mask, RleError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| RleError::BadHeader("empty input".into()))?;
    let (h, w) = parse_header(header)?;
    let runs = parse_runs(lines.next().unwrap_or(""))?;
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(RleError::BadHeader(format!(
            "unexpected trailing line {extra:?}"
        )));
    }
    decode_runs(h, w, &runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_4x4() {
        let m = Mask::zeros(4, 4);
        assert_eq!(to_text(&m), "4 4\n16\n");
        assert_eq!(from_text("4 4\n16").unwrap(), m);
    }

    #[test]
    fn checkerboard_2x2_row_major() {
        // Row-major pixels 1,0 / 0,1 -> runs 0 1 2 1.
        let m = Mask::from_fn(2, 2, |r, c| (r + c) % 2 == 0);
        assert_eq!(encode_runs(&m), vec![0, 1, 2, 1]);
        assert_eq!(from_text(&to_text(&m)).unwrap(), m);
    }

    #[test]
    fn leading_zero_run_with_alternation() {
        // 0 1 1 1 1 -> pixels 1,0,1,0: both rows read 1 0.
        let m = from_text("2 2\n0 1 1 1 1\n").unwrap();
        assert_eq!(m.bits(), &[true, false, true, false]);
        assert_eq!(encode_runs(&m), vec![0, 1, 1, 1, 1]);
    }

    #[test]
    fn overrun_and_underrun() {
        assert_eq!(
            from_text("4 4\n10 7\n"),
            Err(RleError::RleOverrun {
                expected: 16,
                total: 17
            })
        );
        assert_eq!(
            from_text("4 4\n10 5\n"),
            Err(RleError::RleUnderrun {
                expected: 16,
                total: 15
            })
        );
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(from_text(""), Err(RleError::BadHeader(_))));
        assert!(matches!(from_text("4\n16"), Err(RleError::BadHeader(_))));
        assert!(matches!(from_text("0 4\n0"), Err(RleError::BadHeader(_))));
        assert!(matches!(from_text("a b\n1"), Err(RleError::BadHeader(_))));
        assert!(matches!(from_text("4 4;16"), Err(RleError::BadHeader(_))));
        assert!(matches!(from_text("2 2\n1 -1 4"), Err(RleError::BadRun(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let m = Mask::from_fn(h, w, |r, c| (seed >> ((r * w + c) % 64)) & 1 == 1);
            let runs = encode_runs(&m);
            prop_assert_eq!(runs.iter().sum::<usize>(), h * w);
            prop_assert!(runs.iter().skip(1).all(|&r| r > 0));
            prop_assert_eq!(from_text(&to_text(&m)).unwrap(), m);
        }
    }
}
