//! Data-directory and run-directory persistence of corpora and tokenizers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ugen_core::corpus::{read_jsonl, write_jsonl, CorpusRecord, RecordKind};
use ugen_core::tok::{TextTokenizer, VisualCodebook};
use ugen_core::train::{fit_tokenizers, gen_corpus, RunConfig, World};

pub const RUN_CONFIG_FILE: &str = "config.txt";
const CORPUS_FILE: &str = "corpus.jsonl";
const MERGES_FILE: &str = "merges.txt";
const CODEBOOK_FILE: &str = "codebook.bin";

pub struct Tokenizers {
    pub tokenizer: TextTokenizer,
    pub codebook: VisualCodebook,
}

pub fn write_corpus(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let (images, sentences) = gen_corpus(&cfg.data, cfg.seed)?;
    let mut records: Vec<CorpusRecord> = images.iter().map(CorpusRecord::from_sample).collect();
    records.extend(sentences.iter().enumerate().map(|(i, s)| CorpusRecord::from_sentence(s, i as u64)));
    fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_config_string())?;
    let mut w = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    Ok(records.len())
}

fn read_corpus(dir: &Path) -> Result<(Vec<ugen_core::corpus::ImageSample>, Vec<String>)> {
    let path = dir.join(CORPUS_FILE);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut images = Vec::new();
    let mut sentences = Vec::new();
    for r in read_jsonl(BufReader::new(f))? {
        match r.kind {
            RecordKind::Image => images.push(r.to_sample()?),
            RecordKind::Text => sentences.push(r.caption),
        }
    }
    Ok((images, sentences))
}

fn write_tokenizer_files(tokenizer: &TextTokenizer, codebook: &VisualCodebook, dir: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(MERGES_FILE))?);
    tokenizer.write_merges(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(CODEBOOK_FILE))?);
    codebook.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_tokenizer_files(dir: &Path) -> Result<Option<Tokenizers>> {
    let (m, c) = (dir.join(MERGES_FILE), dir.join(CODEBOOK_FILE));
    if !m.exists() || !c.exists() {
        return Ok(None);
    }
    let tokenizer = TextTokenizer::read_merges(BufReader::new(File::open(&m)?))
        .with_context(|| format!("reading {}", m.display()))?;
    let codebook =
        VisualCodebook::read_from(BufReader::new(File::open(&c)?)).with_context(|| format!("reading {}", c.display()))?;
    Ok(Some(Tokenizers { tokenizer, codebook }))
}

/// Fits tokenizers on the corpus in `dir`, generating the corpus first when
/// it is missing.
pub fn write_tokenizers(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if !dir.join(CORPUS_FILE).exists() {
        write_corpus(cfg, dir)?;
    }
    let (images, sentences) = read_corpus(dir)?;
    let (tokenizer, codebook) = fit_tokenizers(&cfg.data, cfg.seed, &images, &sentences)?;
    write_tokenizer_files(&tokenizer, &codebook, dir)
}

/// The data world of `cfg`, read from `data` where present and otherwise
/// rebuilt from the seed.
pub fn load_world(cfg: &RunConfig, data: Option<&Path>) -> Result<World> {
    let Some(dir) = data else {
        return Ok(World::build(&cfg.data, cfg.seed)?);
    };
    let (images, sentences) = read_corpus(dir)?;
    if images.len() != cfg.data.n_images || sentences.len() != cfg.data.n_sentences {
        bail!(
            "{} holds {} images and {} sentences, config expects {} and {}",
            dir.display(),
            images.len(),
            sentences.len(),
            cfg.data.n_images,
            cfg.data.n_sentences
        );
    }
    let (tokenizer, codebook) = match read_tokenizer_files(dir)? {
        Some(t) => (t.tokenizer, t.codebook),
        None => fit_tokenizers(&cfg.data, cfg.seed, &images, &sentences)?,
    };
    Ok(World::from_parts(&cfg.data, cfg.seed, images, sentences, tokenizer, codebook)?)
}

pub fn write_run_tokenizers(world: &World, dir: &Path) -> Result<()> {
    write_tokenizer_files(&world.tokenizer, &world.codebook, dir)
}

pub fn read_run_tokenizers(dir: &Path, cfg: &RunConfig) -> Result<Tokenizers> {
    match read_tokenizer_files(dir)? {
        Some(t) => Ok(t),
        None => {
            let w = World::build(&cfg.data, cfg.seed)?;
            Ok(Tokenizers {
                tokenizer: w.tokenizer,
                codebook: w.codebook,
            })
        }
    }
}

pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::parse(&text, None)?)
}
