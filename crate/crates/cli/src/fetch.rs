use std::fs::{self, File};
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use sha2::{Digest, Sha256};

use vfm_core::data::{read_item_titles, read_ratings, Rating};
use vfm_core::elicitation::build_movie10k;

use crate::{existing, usage, Outcome};

#[derive(Args)]
pub struct FetchArgs {
    /// ml-100k, ml-1m or ml-25m.
    #[arg(long, default_value = "ml-100k")]
    dataset: String,
    /// Local zip archive, extracted directory or single ratings file
    /// (MovieLens or RecBole `.inter`) instead of downloading.
    #[arg(long)]
    from_archive: Option<PathBuf>,
    /// Download from here instead of the GroupLens address.
    #[arg(long)]
    url: Option<String>,
    /// Expected SHA-256 of the archive or file, hex.
    #[arg(long)]
    sha256: Option<String>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Also write `movie10k.csv`: the 100 most rated items by 100 sampled users.
    #[arg(long)]
    movie10k: bool,
    #[arg(long, default_value_t = 0)]
    matrix_seed: u64,
}

const RATINGS_NAMES: [&str; 3] = ["u.data", "ratings.dat", "ratings.csv"];
const ITEM_NAMES: [&str; 3] = ["u.item", "movies.dat", "movies.csv"];

fn is_ratings(name: &str) -> bool {
    RATINGS_NAMES.contains(&name) || name.ends_with(".inter")
}

fn is_items(name: &str) -> bool {
    ITEM_NAMES.contains(&name) || name.ends_with(".item")
}

/// Raw ratings text and, when present, item text.
struct Sources {
    ratings: String,
    items: Option<String>,
}

fn decode(bytes: Vec<u8>) -> String {
    // u.item is Latin-1
    String::from_utf8(bytes).unwrap_or_else(|e| e.into_bytes().iter().map(|&b| b as char).collect())
}

fn from_zip(bytes: &[u8]) -> anyhow::Result<Sources> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).context("opening zip archive")?;
    let (mut ratings, mut items) = (None, None);
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i)?;
        let name = Path::new(entry.name())
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let slot = if is_ratings(&name) && ratings.is_none() {
            &mut ratings
        } else if is_items(&name) && items.is_none() {
            &mut items
        } else {
            continue;
        };
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf)?;
        *slot = Some(decode(buf));
    }
    let Some(ratings) = ratings else {
        bail!(
            "archive holds no ratings file ({} or *.inter)",
            RATINGS_NAMES.join(", ")
        );
    };
    Ok(Sources { ratings, items })
}

fn from_dir(dir: &Path) -> anyhow::Result<Sources> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    let find = |pred: fn(&str) -> bool| {
        names
            .iter()
            .find(|p| p.file_name().is_some_and(|n| pred(&n.to_string_lossy())))
            .cloned()
    };
    let Some(ratings) = find(is_ratings) else {
        bail!("{} holds no ratings file", dir.display());
    };
    Ok(Sources {
        ratings: decode(fs::read(ratings)?),
        items: find(is_items).map(fs::read).transpose()?.map(decode),
    })
}

fn url_for(dataset: &str) -> Option<String> {
    matches!(dataset, "ml-100k" | "ml-1m" | "ml-25m")
        .then(|| format!("https://files.grouplens.org/datasets/movielens/{dataset}.zip"))
}

fn download(url: &str) -> anyhow::Result<Vec<u8>> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let resp = reqwest::get(url).await?.error_for_status()?;
        Ok(resp.bytes().await?.to_vec())
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn verify(bytes: &[u8], expected: Option<&str>) -> anyhow::Result<()> {
    let digest = hex(&Sha256::digest(bytes));
    eprintln!("sha256 {digest}");
    if let Some(want) = expected {
        if !digest.eq_ignore_ascii_case(want.trim()) {
            bail!("checksum mismatch: expected {want}, got {digest}");
        }
    }
    Ok(())
}

fn write_ratings(path: &Path, ratings: &[Rating]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in ratings {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.rating)?;
    }
    out.flush()?;
    Ok(())
}

fn write_items(path: &Path, items: &[(usize, String)]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, title) in items {
        writeln!(out, "{id}|{title}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn run(args: FetchArgs) -> Outcome {
    let sources = match &args.from_archive {
        Some(path) => {
            let path = existing(path)?;
            if path.is_dir() {
                if args.sha256.is_some() {
                    return usage("--sha256 needs an archive or file, not a directory");
                }
                from_dir(&path)?
            } else {
                let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                verify(&bytes, args.sha256.as_deref())?;
                if bytes.starts_with(b"PK") {
                    from_zip(&bytes)?
                } else {
                    Sources {
                        ratings: decode(bytes),
                        items: None,
                    }
                }
            }
        }
        None => {
            let url = match (&args.url, url_for(&args.dataset)) {
                (Some(u), _) => u.clone(),
                (None, Some(u)) => u,
                (None, None) => {
                    return usage(format!(
                        "unknown dataset {:?}; give --url or --from-archive",
                        args.dataset
                    ))
                }
            };
            eprintln!("downloading {url}");
            let bytes = download(&url).with_context(|| format!("downloading {url}"))?;
            verify(&bytes, args.sha256.as_deref())?;
            from_zip(&bytes)?
        }
    };

    let ratings = read_ratings(sources.ratings.as_bytes()).context("parsing ratings")?;
    let dir = args.out.join(&args.dataset);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_ratings(&dir.join("u.data"), &ratings)?;
    if let Some(text) = &sources.items {
        let items = read_item_titles(text.as_bytes()).context("parsing item titles")?;
        write_items(&dir.join("u.item"), &items)?;
    }
    let users = ratings.iter().map(|r| r.user).max().unwrap_or(0) + 1;
    let items = ratings.iter().map(|r| r.item).max().unwrap_or(0) + 1;
    println!(
        "{}: {} instances, {users} users, {items} items -> {}",
        args.dataset,
        ratings.len(),
        dir.join("u.data").display()
    );
    if args.movie10k {
        let matrix = build_movie10k(&ratings, args.matrix_seed)?;
        let path = dir.join("movie10k.csv");
        let mut out = BufWriter::new(File::create(&path)?);
        matrix.write_csv(&mut out)?;
        out.flush()?;
        println!(
            "movie10k: {} x {} -> {}",
            matrix.num_users(),
            matrix.num_items(),
            path.display()
        );
    }
    Ok(())
}
