//! JSON-lines split files: one `meta` record, then each task record followed
//! by its example records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{BenchmarkSplit, SplitMeta, Task, TaskSet};
use super::task::{Example, TaskSpec, Target, Token};
use super::GenError;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Record {
    Meta(SplitMeta),
    Task {
        index: usize,
        set: TaskSet,
        num_examples: usize,
        spec: TaskSpec,
    },
    Example {
        task: usize,
        x: Vec<Token>,
        y: Target,
    },
}

fn line(record: &Record) -> String {
    serde_json::to_string(record).expect("split records always serialize")
}

pub fn write_split<W: Write>(split: &BenchmarkSplit, mut out: W) -> Result<(), GenError> {
    writeln!(out, "{}", line(&Record::Meta(split.meta.clone())))?;
    let sets = [
        (TaskSet::Train, &split.train),
        (TaskSet::Val, &split.val),
        (TaskSet::Test, &split.test),
    ];
    let mut index = 0;
    for (set, tasks) in sets {
        for t in tasks {
            let head = Record::Task {
                index,
                set,
                num_examples: t.examples.len(),
                spec: t.spec.clone(),
            };
            writeln!(out, "{}", line(&head))?;
            for e in &t.examples {
                let rec = Record::Example {
                    task: index,
                    x: e.x.clone(),
                    y: e.y.clone(),
                };
                writeln!(out, "{}", line(&rec))?;
            }
            index += 1;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn serialize_split(split: &BenchmarkSplit, path: &Path) -> Result<(), GenError> {
    write_split(split, BufWriter::new(File::create(path)?))
}

struct Pending {
    index: usize,
    set: TaskSet,
    expected: usize,
    task: Task,
}

pub fn read_split<R: BufRead>(input: R) -> Result<BenchmarkSplit, GenError> {
    let mut meta = None;
    let mut split_sets: [Vec<Task>; 3] = Default::default();
    let mut current: Option<Pending> = None;
    let mut next_index = 0;

    let finish = |p: Pending, sets: &mut [Vec<Task>; 3]| -> Result<(), GenError> {
        if p.task.examples.len() != p.expected {
            return Err(GenError::Truncated {
                task: p.index,
                expected: p.expected,
                found: p.task.examples.len(),
            });
        }
        let slot = match p.set {
            TaskSet::Train => 0,
            TaskSet::Val => 1,
            TaskSet::Test => 2,
        };
        sets[slot].push(p.task);
        Ok(())
    };

    for (i, text) in input.lines().enumerate() {
        let lineno = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&text).map_err(|e| GenError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let parse_err = |msg: String| GenError::Parse { line: lineno, msg };
        match record {
            Record::Meta(m) => {
                if meta.is_some() {
                    return Err(parse_err("duplicate meta record".into()));
                }
                meta = Some(m);
            }
            _ if meta.is_none() => return Err(parse_err("first record must be meta".into())),
            Record::Task {
                index,
                set,
                num_examples,
                spec,
            } => {
                if index != next_index {
                    return Err(parse_err(format!("expected task index {next_index}, found {index}")));
                }
                next_index += 1;
                if let Some(p) = current.take() {
                    finish(p, &mut split_sets)?;
                }
                current = Some(Pending {
                    index,
                    set,
                    expected: num_examples,
                    task: Task {
                        spec,
                        examples: Vec::with_capacity(num_examples),
                    },
                });
            }
            Record::Example { task, x, y } => match current.as_mut() {
                Some(p) if p.index == task => p.task.examples.push(Example { x, y }),
                _ => return Err(parse_err(format!("example for task {task} outside its task block"))),
            },
        }
    }
    if let Some(p) = current.take() {
        finish(p, &mut split_sets)?;
    }
    let meta = meta.ok_or(GenError::Parse {
        line: 0,
        msg: "missing meta record".into(),
    })?;
    let [train, val, test] = split_sets;
    let cfg = &meta.config;
    for (name, got, want) in [
        ("train", train.len(), cfg.train_tasks),
        ("val", val.len(), cfg.val_tasks),
        ("test", test.len(), cfg.test_tasks),
    ] {
        if got != want {
            return Err(GenError::Parse {
                line: 0,
                msg: format!("{name} set has {got} of {want} tasks after {next_index} task records"),
            });
        }
    }
    Ok(BenchmarkSplit { meta, train, val, test })
}

pub fn load_split(path: &Path) -> Result<BenchmarkSplit, GenError> {
    read_split(BufReader::new(File::open(path)?))
}
