//! Box files and `key=value` configuration files.

use std::fmt::Write as _;
use std::path::Path;

use nightrack_core::BBox;

use crate::error::{CliError, CliResult};

/// One `x,y,w,h` box per line. Blank lines are skipped; whitespace around
/// fields is allowed. Line numbers in errors are 1-based.
pub fn parse_boxes(text: &str, path: &Path) -> CliResult<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!(
                "expected 4 comma-separated values, found {}",
                fields.len()
            )));
        }
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("`{f}` is not a number")))?;
        }
        out.push(BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> CliResult<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::unreadable(path, e))?;
    parse_boxes(&text, path)
}

/// Four fractional digits per field.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{:.4},{:.4},{:.4},{:.4}", b.x, b.y, b.w, b.h);
    }
    s
}

/// `key=value` pairs in file order. `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: format!("expected key=value, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.txt")
    }

    #[test]
    fn boxes_round_trip_at_four_decimals() {
        let boxes = vec![
            BBox::new(1.0, 2.5, 10.25, 4.0).unwrap(),
            BBox::new(-3.12345, 0.0, 0.5, 99.99999).unwrap(),
        ];
        let text = format_boxes(&boxes);
        assert_eq!(text.lines().next().unwrap(), "1.0000,2.5000,10.2500,4.0000");
        let back = parse_boxes(&text, p()).unwrap();
        assert_eq!(format_boxes(&back), text);
        for (a, b) in back.iter().zip(&boxes) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 5e-5);
            }
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "1,2,3,4\n\n5,6,7,8\n1,2,x,4\n";
        match parse_boxes(text, p()) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_boxes("1,2,3\n", p()),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_boxes("1,2,0,4\n", p()),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_boxes("1,2,NaN,4\n", p()),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert_eq!(parse_boxes(" 1 , 2 ,3, 4 \n", p()).unwrap().len(), 1);
    }

    #[test]
    fn config_lines_and_comments() {
        let text = "# header\nd1 = 32 # inline\n\nenhance=false\n";
        let kv = parse_config(text, p()).unwrap();
        assert_eq!(
            kv,
            vec![
                ("d1".into(), "32".into()),
                ("enhance".into(), "false".into())
            ]
        );
        assert!(matches!(
            parse_config("a=1\nnope\n", p()),
            Err(CliError::Parse { line: 2, .. })
        ));
    }
}
