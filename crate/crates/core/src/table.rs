//! CSV conventions shared by every report: comma separated, header row, LF
//! line endings, numbers with 9 significant digits.

/// `printf("%.9g")`-style formatting.
pub fn sig9(x: f64) -> String {
    format_sig(x, 9)
}

pub fn format_sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Minimal CSV builder with the dialect above.
#[derive(Debug, Default, Clone)]
pub struct CsvTable {
    out: String,
}

impl CsvTable {
    pub fn with_header(columns: &[&str]) -> Self {
        let mut t = CsvTable::default();
        t.row(columns.iter().map(|c| c.to_string()));
        t
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for cell in cells {
            if !first {
                self.out.push(',');
            }
            first = false;
            self.out.push_str(cell.as_ref());
        }
        self.out.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.out
    }

    pub fn into_string(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(50.0 / 51.0), "0.980392157");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(sig9(0.0001), "0.0001");
        assert_eq!(sig9(0.00001234), "1.234e-05");
        assert_eq!(sig9(-2.5), "-2.5");
        assert_eq!(sig9(std::f64::consts::PI), "3.14159265");
        assert_eq!(sig9(9.9999999999), "10");
    }

    #[test]
    fn csv_rows() {
        let mut t = CsvTable::with_header(&["a", "b"]);
        t.row(["1", "2"]);
        assert_eq!(t.as_str(), "a,b\n1,2\n");
    }
}
