use std::fs;
use std::io::Read;
use std::path::Path;

use super::{categorize_profession, DeterminerClass, GenderedPair, Profession, Template};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProfessions {
    pub professions: Vec<Profession>,
    /// One message per row excluded for falling outside every category band.
    pub warnings: Vec<String>,
}

pub fn load_professions(path: impl AsRef<Path>) -> Result<LoadedProfessions> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_professions(file, &path.display().to_string())
}

fn parse_error(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn check_header(
    reader: &mut csv::Reader<impl Read>,
    source: &str,
    expected: &[&str],
) -> Result<()> {
    let header = reader.headers().map_err(|e| parse_error(source, 1, e.to_string()))?;
    if header.is_empty() {
        return Err(Error::EmptyInput(source.to_string()));
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(parse_error(
            source,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Parses `name,female_share_percent,employed`. An `employed` cell may be
/// empty or a dash.
pub fn parse_professions(input: impl Read, source: &str) -> Result<LoadedProfessions> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(&mut reader, source, &["name", "female_share_percent", "employed"])?;

    let mut professions = Vec::new();
    let mut warnings = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        rows += 1;
        if record.len() < 2 || record.len() > 3 {
            return Err(parse_error(
                source,
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let name = record[0].trim().to_lowercase();
        if name.is_empty() {
            return Err(parse_error(source, line, "empty profession name"));
        }
        let percent: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_error(source, line, format!("bad percentage `{}`", &record[1])))?;
        if !(0.0..=100.0).contains(&percent) {
            return Err(parse_error(
                source,
                line,
                format!("percentage {percent} outside [0, 100]"),
            ));
        }
        let employed = match record.get(2).map(str::trim) {
            None | Some("") | Some("-") | Some("—") => None,
            Some(raw) => Some(raw.replace(',', "").parse::<u64>().map_err(|_| {
                parse_error(source, line, format!("bad employed count `{raw}`"))
            })?),
        };
        let female_share = percent / 100.0;
        match categorize_profession(female_share)? {
            Some(category) => professions.push(Profession {
                name,
                female_share,
                employed,
                category,
            }),
            None => warnings.push(format!(
                "{source}:{line}: `{name}` excluded, female share {percent}% lies in no category band"
            )),
        }
    }
    if rows == 0 {
        return Err(Error::EmptyInput(source.to_string()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedProfessions {
        professions,
        warnings,
    })
}

pub fn load_gendered_pairs(path: impl AsRef<Path>) -> Result<Vec<GenderedPair>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_gendered_pairs(file, &path.display().to_string())
}

/// Parses `male,female,determiner_class` with classes `none`, `this`, `my`.
pub fn parse_gendered_pairs(input: impl Read, source: &str) -> Result<Vec<GenderedPair>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(&mut reader, source, &["male", "female", "determiner_class"])?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(parse_error(
                source,
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let determiner_class = match record[2].trim().to_lowercase().as_str() {
            "none" | "" => DeterminerClass::None,
            "this" => DeterminerClass::This,
            "my" => DeterminerClass::My,
            other => {
                return Err(parse_error(
                    source,
                    line,
                    format!("unknown determiner class `{other}`"),
                ))
            }
        };
        let male = record[0].trim().to_lowercase();
        let female = record[1].trim().to_lowercase();
        if male.is_empty() || female.is_empty() || male.contains(' ') || female.contains(' ') {
            return Err(parse_error(source, line, "gendered words must be single tokens"));
        }
        pairs.push(GenderedPair {
            male,
            female,
            determiner_class,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput(source.to_string()));
    }
    Ok(pairs)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&text, &path.display().to_string())
}

/// One template per line: `id<TAB>text`. Blank lines and `#` comments are
/// skipped.
pub fn parse_templates(text: &str, source: &str) -> Result<Vec<Template>> {
    let mut templates: Vec<Template> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(source, line_no, "expected `id<TAB>text`"))?;
        let id = id.trim();
        if templates.iter().any(|t| t.id == id) {
            return Err(parse_error(source, line_no, format!("duplicate template id {id}")));
        }
        let template = Template::new(id, body.trim())
            .map_err(|e| parse_error(source, line_no, e.to_string()))?;
        templates.push(template);
    }
    if templates.is_empty() {
        return Err(Error::EmptyInput(source.to_string()));
    }
    Ok(templates)
}
