//! Minimal deterministic CSV emission. Identical (seed, config) pairs
//! produce byte-identical files once the wall-clock columns are excluded;
//! every file embeds the config hash for provenance.

pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub config_hash: String,
}

impl CsvTable {
    pub fn new(header: &[&str], config_hash: String) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            config_hash,
        }
    }

    pub fn push(&mut self, fields: Vec<String>) {
        assert_eq!(
            fields.len(),
            self.header.len(),
            "row does not match the schema"
        );
        self.rows.push(fields);
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# config_sha256={}\n", self.config_hash));
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// The table with every measured wall-clock column removed; this is the
    /// byte-deterministic part.
    pub fn without_timing_columns(&self) -> String {
        let keep: Vec<usize> = self
            .header
            .iter()
            .enumerate()
            .filter(|(_, h)| !h.contains("wall_ms"))
            .map(|(i, _)| i)
            .collect();
        let mut out = String::new();
        out.push_str(&format!("# config_sha256={}\n", self.config_hash));
        let header: Vec<&str> = keep.iter().map(|i| self.header[*i].as_str()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<&str> = keep.iter().map(|i| row[*i].as_str()).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Assemble a CSV from typed rows.
pub fn rows_to_csv<R>(
    header: &[&str],
    rows: &[R],
    to_fields: impl Fn(&R) -> Vec<String>,
    config_hash: String,
) -> CsvTable {
    let mut table = CsvTable::new(header, config_hash);
    for r in rows {
        table.push(to_fields(r));
    }
    table
}
