//! Text formats: the comma-separated dataset format and the two-section
//! partition listing.
//!
//! Dataset files are UTF-8 with LF line endings: a header line first, one
//! column named `label`, all other columns numeric features. Partition
//! files hold `[in]` and `[out]` sections with one class id per line.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ClassPartition, Dataset, Role};
use crate::error::{Error, Result};

/// Parses a dataset file. Label values are mapped to dense class ids in
/// first-appearance order; all other columns become features in header
/// order.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "file is empty".into(),
        })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "no column named `label` in header".into(),
        })?;
    let width = columns.len();

    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_order = 0usize;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        for (col, field) in fields.iter().enumerate() {
            if col == label_col {
                let key = field.trim().to_string();
                let next = class_order;
                let id = *class_ids.entry(key).or_insert_with(|| {
                    class_order += 1;
                    next
                });
                labels.push(id);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("column {:?} is not numeric: {:?}", columns[col], field),
                })?;
                features.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file has a header but no data rows".into(),
        });
    }
    Dataset::new(
        features,
        width - 1,
        labels,
        class_order,
        Role::Train,
        format!("file:{}", path.display()),
    )
}

/// Writes a dataset in the format [`load_dataset`] reads. Feature values
/// are printed with shortest round-trip formatting, so a write/read cycle
/// is exact.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let mut header = String::from("label");
    for d in 0..dataset.dim() {
        header.push_str(&format!(",f{d}"));
    }
    writeln!(file, "{header}")?;
    for i in 0..dataset.len() {
        let mut line = dataset.label(i).to_string();
        for v in dataset.row(i) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Writes a partition as `[in]` / `[out]` sections, one class id per line.
pub fn save_partition(partition: &ClassPartition, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "[in]")?;
    for c in &partition.in_classes {
        writeln!(file, "{c}")?;
    }
    writeln!(file, "[out]")?;
    for c in &partition.out_classes {
        writeln!(file, "{c}")?;
    }
    Ok(())
}

/// Reads a partition file written by [`save_partition`]. The merge tree is
/// not part of the format, so the result carries none.
pub fn load_partition(path: &Path) -> Result<ClassPartition> {
    let text = fs::read_to_string(path)?;
    let mut in_classes = Vec::new();
    let mut out_classes = Vec::new();
    let mut current: Option<&mut Vec<usize>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[in]" => current = Some(&mut in_classes),
            "[out]" => current = Some(&mut out_classes),
            _ => {
                let class: usize = line.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("expected a class id, found {line:?}"),
                })?;
                match current.as_deref_mut() {
                    Some(section) => section.push(class),
                    None => {
                        return Err(Error::Parse {
                            line: idx + 1,
                            message: "class id before any [in]/[out] section".into(),
                        })
                    }
                }
            }
        }
    }
    ClassPartition::from_sets(in_classes, out_classes, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobSpec};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("oodbench-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn labels_map_in_first_appearance_order() {
        let dir = tmpdir("tab1");
        let path = dir.join("d.csv");
        fs::write(&path, "f0,label\n1.5,a\n2.5,b\n3.5,a\n").unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.row(2), &[3.5]);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn ragged_row_names_the_line() {
        let dir = tmpdir("tab2");
        let path = dir.join("d.csv");
        fs::write(&path, "label,f0\na,1.0\nb,2.0,9.0\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn non_numeric_feature_names_the_line() {
        let dir = tmpdir("tab3");
        let path = dir.join("d.csv");
        fs::write(&path, "label,f0\na,1.0\nb,oops\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn missing_label_column_is_rejected() {
        let dir = tmpdir("tab4");
        let path = dir.join("d.csv");
        fs::write(&path, "f0,f1\n1.0,2.0\n").unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::Parse { line: 1, .. })
        ));
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn generated_dataset_round_trips() {
        let spec = BlobSpec {
            classes: 4,
            per_class: 10,
            dim: 3,
            supercluster_count: 2,
            spread: 1.0,
            noise: 0.5,
        };
        let ds = generate_blobs(&spec, 9).unwrap();
        let dir = tmpdir("tab5");
        let path = dir.join("blobs.csv");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.labels(), ds.labels());
        for i in 0..ds.len() {
            for (a, b) in loaded.row(i).iter().zip(ds.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn partition_round_trips() {
        let partition = ClassPartition::from_sets(vec![3, 1], vec![0, 2], None).unwrap();
        let dir = tmpdir("tab6");
        let path = dir.join("partition.txt");
        save_partition(&partition, &path).unwrap();
        let loaded = load_partition(&path).unwrap();
        assert_eq!(loaded.in_classes, vec![3, 1]);
        assert_eq!(loaded.out_classes, vec![0, 2]);
        assert_eq!(loaded.in_label_of(1), Some(1));
        fs::remove_dir_all(dir).ok();
    }
}
