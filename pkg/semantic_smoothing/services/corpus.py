"""
Embeddings, substitution tables, datasets and the synthetic confounded corpus.

File formats:
    embeddings     UTF-8 text, ``word v1 ... vd`` per line
    substitutions  JSON object mapping a word to an array of substitute words
    dataset        TSV ``example_id<TAB>label<TAB>space-joined tokens``
"""

import itertools
import json
import logging
import math
from collections.abc import Iterable, Iterator
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from semantic_smoothing.errors import ConfigurationError, CorpusFormatError, VocabularyLookupError
from semantic_smoothing.models.schemas import LabeledExample, SyntheticSpec
from semantic_smoothing.models.state import EmbeddingMatrix, SubstitutionTable, SyntheticCorpus

logger = logging.getLogger(__name__)

SATURATED_SIZE = 2**63 - 1

# Geometry of the generated embedding space.
PROTOTYPE_NORM = 2.0
HEADWORD_SPREAD = 0.3
SUBSTITUTE_RADIUS = 0.1
FILLER_SPREAD = 0.3


def _read_lines(path: Path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorpusFormatError(f"cannot read file: {e}", path=path) from e
    except UnicodeDecodeError as e:
        raise CorpusFormatError(f"not UTF-8 text: {e}", path=path) from e


def load_embeddings(path: Path | str) -> EmbeddingMatrix:
    """
    Read ``word v1 ... vd`` lines into an embedding matrix.

    Raises:
        CorpusFormatError: on ragged rows, duplicate words or unparsable numbers.
    """
    path = Path(path)
    words: list[str] = []
    rows: list[list[float]] = []
    seen: dict[str, int] = {}
    dim: int | None = None
    for line_number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        word, *values = line.split()
        if word in seen:
            raise CorpusFormatError(f"duplicate word {word!r} (first on line {seen[word]})", path, line_number)
        if not values:
            raise CorpusFormatError(f"word {word!r} has no vector", path, line_number)
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise CorpusFormatError(f"expected {dim} values, found {len(values)}", path, line_number)
        try:
            vector = [float(value) for value in values]
        except ValueError as e:
            raise CorpusFormatError(f"bad number: {e}", path, line_number) from e
        if not all(math.isfinite(value) for value in vector):
            raise CorpusFormatError("non-finite embedding value", path, line_number)
        seen[word] = line_number
        words.append(word)
        rows.append(vector)
    if not words:
        raise CorpusFormatError("no embeddings found", path)
    return EmbeddingMatrix(words=words, vectors=np.array(rows, dtype=np.float64))


def save_embeddings(embeddings: EmbeddingMatrix, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for word, vector in zip(embeddings.words, embeddings.vectors, strict=True):
            handle.write(" ".join([word, *(repr(float(value)) for value in vector)]) + "\n")
    return path


def _line_of(text: str, word: str) -> int | None:
    position = text.find(json.dumps(word))
    return None if position < 0 else text.count("\n", 0, position) + 1


def load_substitution_table(path: Path | str, vocabulary: Iterable[str] | None = None) -> SubstitutionTable:
    """
    Read a JSON substitution table.

    Duplicates are removed keeping first occurrence and a headword listed as its
    own substitute is dropped. When a vocabulary is given every substitute must
    belong to it and so must every headword.

    Raises:
        CorpusFormatError: on malformed JSON, wrong value types or words outside the vocabulary.
    """
    path = Path(path)
    text = "\n".join(_read_lines(path))
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"malformed JSON: {e.msg}", path, e.lineno) from e
    if not isinstance(raw, dict):
        raise CorpusFormatError("top level must be a JSON object", path, 1)

    known = set(vocabulary) if vocabulary is not None else None
    for head, substitutes in raw.items():
        if not isinstance(substitutes, list) or not all(isinstance(s, str) for s in substitutes):
            raise CorpusFormatError(f"entry {head!r} must be an array of strings", path, _line_of(text, head))
        if known is None:
            continue
        if head not in known:
            raise CorpusFormatError(f"headword {head!r} is not in the vocabulary", path, _line_of(text, head))
        for substitute in substitutes:
            if substitute not in known and substitute != head:
                raise CorpusFormatError(
                    f"substitute {substitute!r} of {head!r} is not in the vocabulary", path, _line_of(text, head)
                )
    return SubstitutionTable(entries=raw)


def save_substitution_table(table: SubstitutionTable, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table.entries, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_dataset(path: Path | str, vocabulary: Iterable[str] | None = None) -> list[LabeledExample]:
    """
    Read a TSV dataset.

    Raises:
        CorpusFormatError: on malformed rows, duplicate ids or out-of-vocabulary tokens.
    """
    path = Path(path)
    known = set(vocabulary) if vocabulary is not None else None
    examples: list[LabeledExample] = []
    ids: set[int] = set()
    for line_number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise CorpusFormatError(f"expected 3 tab-separated fields, found {len(fields)}", path, line_number)
        try:
            example = LabeledExample(example_id=int(fields[0]), label=int(fields[1]), tokens=fields[2].split())
        except (ValueError, ValidationError) as e:
            raise CorpusFormatError(f"invalid example: {e}", path, line_number) from e
        if example.example_id in ids:
            raise CorpusFormatError(f"duplicate example_id {example.example_id}", path, line_number)
        if known is not None:
            unknown = [token for token in example.tokens if token not in known]
            if unknown:
                raise CorpusFormatError(f"unknown token {unknown[0]!r}", path, line_number)
        ids.add(example.example_id)
        examples.append(example)
    return examples


def save_dataset(examples: Iterable[LabeledExample], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for example in examples:
            handle.write(f"{example.example_id}\t{example.label}\t{' '.join(example.tokens)}\n")
    return path


def tokenize(text: str) -> list[str]:
    """Lower-case whitespace tokenization."""
    return text.lower().split()


def encode_tokens(tokens: list[str], word_index: dict[str, int]) -> np.ndarray:
    """
    Map words to embedding rows.

    Raises:
        VocabularyLookupError: naming the first unknown word.
    """
    ids = np.empty(len(tokens), dtype=np.int64)
    for position, word in enumerate(tokens):
        try:
            ids[position] = word_index[word]
        except KeyError:
            raise VocabularyLookupError(word) from None
    return ids


def neighborhood_size(tokens: list[str], table: SubstitutionTable) -> int:
    """Product over positions of (substitutes + 1), saturating at 2**63 - 1."""
    size = 1
    for word in tokens:
        size *= len(table.substitutes(word)) + 1
        if size >= SATURATED_SIZE:
            return SATURATED_SIZE
    return size


def enumerate_neighborhood(tokens: list[str], table: SubstitutionTable) -> Iterator[list[str]]:
    """Every member of the neighborhood in lexicographic order; the input itself comes first."""
    for choice in itertools.product(*(table.options(word) for word in tokens)):
        yield list(choice)


def label_from_tokens(tokens: list[str], content_class: dict[str, int], num_classes: int) -> int:
    """Majority class among content words; ties go to the lowest class index."""
    counts = [0] * num_classes
    for word in tokens:
        if word in content_class:
            counts[content_class[word]] += 1
    return max(range(num_classes), key=lambda c: (counts[c], -c))


def _check_feasible(spec: SyntheticSpec) -> int:
    content = spec.num_clusters * spec.cluster_size
    style = spec.num_classes * spec.style_tokens_per_class
    fillers = spec.vocabulary_size - content - style
    if spec.cluster_size > spec.vocabulary_size:
        raise ConfigurationError(
            f"cluster size {spec.cluster_size} exceeds vocabulary size {spec.vocabulary_size}"
        )
    if fillers < 0:
        raise ConfigurationError(
            f"vocabulary of {spec.vocabulary_size} cannot hold {content} content and {style} style words"
        )
    if spec.num_clusters < spec.num_classes:
        raise ConfigurationError(f"need at least one cluster per class ({spec.num_classes}), got {spec.num_clusters}")
    padding = spec.sequence_length - spec.content_tokens - 1
    if padding < 0:
        raise ConfigurationError(
            f"sequence length {spec.sequence_length} cannot hold {spec.content_tokens} content tokens and a style token"
        )
    if padding > 0 and fillers == 0:
        raise ConfigurationError("sequences need filler words but the vocabulary leaves none")
    return fillers


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """
    Build a corpus whose labels depend only on content-cluster identity.

    Cluster c carries class c mod K. Each sequence holds content words, one
    style word and fillers, shuffled. Style words agree with the label with
    probability confounder_strength in train and test, and are drawn uniformly
    in the intervened split.

    Raises:
        ConfigurationError: if the spec cannot be realized.
    """
    num_fillers = _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    dim = spec.embedding_dim

    prototypes = rng.normal(size=(spec.num_classes, dim))
    prototypes *= PROTOTYPE_NORM / np.linalg.norm(prototypes, axis=1, keepdims=True)

    words: list[str] = []
    vectors: list[np.ndarray] = []
    clusters: list[list[str]] = []
    content_class: dict[str, int] = {}
    content_cluster: dict[str, int] = {}
    for cluster in range(spec.num_clusters):
        cls = cluster % spec.num_classes
        headword = prototypes[cls] + HEADWORD_SPREAD * rng.normal(size=dim)
        members = []
        for member in range(spec.cluster_size):
            word = f"c{cluster}_{member}"
            vector = headword if member == 0 else headword + rng.uniform(-SUBSTITUTE_RADIUS, SUBSTITUTE_RADIUS, dim)
            words.append(word)
            vectors.append(vector)
            members.append(word)
            content_class[word] = cls
            content_cluster[word] = cluster
        clusters.append(members)

    styles_by_class: list[list[str]] = []
    style_class: dict[str, int] = {}
    for cls in range(spec.num_classes):
        styles = []
        for j in range(spec.style_tokens_per_class):
            word = f"s{cls}_{j}"
            words.append(word)
            vectors.append(rng.normal(size=dim))
            styles.append(word)
            style_class[word] = cls
        styles_by_class.append(styles)
    all_styles = [word for styles in styles_by_class for word in styles]

    fillers = []
    for i in range(num_fillers):
        word = f"f{i}"
        words.append(word)
        vectors.append(FILLER_SPREAD * rng.normal(size=dim))
        fillers.append(word)

    table = SubstitutionTable(
        entries={word: [other for other in members if other != word] for members in clusters for word in members}
    )
    embeddings = EmbeddingMatrix(words=words, vectors=np.array(vectors))

    clusters_by_class = [
        [c for c in range(spec.num_clusters) if c % spec.num_classes == cls] for cls in range(spec.num_classes)
    ]

    def draw_example(example_id: int, confounder_strength: float) -> LabeledExample:
        target = int(rng.integers(spec.num_classes))
        own = clusters_by_class[target]
        others = [c for c in range(spec.num_clusters) if c % spec.num_classes != target]
        content = []
        for _ in range(spec.content_tokens):
            pool = own if rng.random() < spec.content_strength else others
            cluster = pool[int(rng.integers(len(pool)))]
            content.append(clusters[cluster][int(rng.integers(spec.cluster_size))])
        label = label_from_tokens(content, content_class, spec.num_classes)
        if rng.random() < confounder_strength:
            candidates = styles_by_class[label]
        else:
            candidates = all_styles
        style = candidates[int(rng.integers(len(candidates)))]
        padding = [fillers[int(rng.integers(num_fillers))] for _ in range(spec.sequence_length - len(content) - 1)]
        tokens = [*content, style, *padding]
        order = rng.permutation(len(tokens))
        return LabeledExample(example_id=example_id, tokens=[tokens[i] for i in order], label=label)

    train = [draw_example(i, spec.confounder_strength) for i in range(spec.num_train)]
    offset = spec.num_train
    test = [draw_example(offset + i, spec.confounder_strength) for i in range(spec.num_test)]
    offset += spec.num_test
    intervened = [draw_example(offset + i, 0.0) for i in range(spec.num_test)]

    logger.info(
        "Generated %d train, %d test and %d intervened examples over %d words",
        len(train),
        len(test),
        len(intervened),
        len(words),
    )
    return SyntheticCorpus(
        train=train,
        test=test,
        intervened=intervened,
        table=table,
        embeddings=embeddings,
        content_class=content_class,
        content_cluster=content_cluster,
        style_class=style_class,
    )
