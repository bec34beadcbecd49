"""Feature extraction determinism and t-SNE cluster preservation."""

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from defectdiff.classifier import Backbone, build_classifier
from defectdiff.feature_analysis import (
    CATEGORIES,
    CATEGORY_REAL_DEF,
    CATEGORY_REAL_NONDEF,
    CATEGORY_SYNTH_DEF,
    FeatureMatrix,
    TsneConfig,
    categorize_record,
    extract_features,
    plot_embedding,
    projection_metadata,
    tsne_project,
    write_embedding_csv,
    _build_figure,
)
from defectdiff.ingestion import DatasetManifest, ImageRecord, load_binary_folders
from defectdiff.toydata import make_binary_corpus


def two_blob_features(n=200, dim=64, gap=6.0, seed=0):
    """Two well-separated Gaussian clusters with known ids."""
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.normal(0.0, 1.0, size=(half, dim))
    b = rng.normal(0.0, 1.0, size=(n - half, dim)) + gap
    vectors = np.vstack([a, b])
    ids = np.array([0] * half + [1] * (n - half))
    cats = tuple(
        CATEGORY_REAL_NONDEF if i == 0 else CATEGORY_REAL_DEF for i in ids
    )
    paths = tuple(f"mem/{i:03d}.png" for i in range(n))
    return FeatureMatrix(vectors=vectors, categories=cats, paths=paths), ids


def test_categorize_record_mapping(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"")
    nd = ImageRecord(path=str(p), label="non_defective", source="real")
    rd = ImageRecord(path=str(p), label="defective", source="real")
    sd = ImageRecord(path=str(p), label="defective", source="synthetic")
    assert categorize_record(nd) == CATEGORY_REAL_NONDEF
    assert categorize_record(rd) == CATEGORY_REAL_DEF
    assert categorize_record(sd) == CATEGORY_SYNTH_DEF


def test_feature_matrix_validation():
    ok = np.zeros((4, 8))
    cats = (CATEGORY_REAL_DEF,) * 4
    paths = ("a", "b", "c", "d")
    FeatureMatrix(vectors=ok, categories=cats, paths=paths)
    with pytest.raises(ValueError, match="non-finite"):
        bad = ok.copy()
        bad[0, 0] = np.nan
        FeatureMatrix(vectors=bad, categories=cats, paths=paths)
    with pytest.raises(ValueError, match="one entry per row"):
        FeatureMatrix(vectors=ok, categories=cats[:3], paths=paths)
    with pytest.raises(ValueError, match="unknown category"):
        FeatureMatrix(vectors=ok, categories=("mystery",) * 4, paths=paths)


def test_tsne_config_defaults_and_guard():
    cfg = TsneConfig()
    assert cfg.perplexity == 30.0
    assert cfg.iterations == 2000
    assert cfg.seed == 42
    assert cfg.out_dim == 2
    cfg.validate_for(200)
    with pytest.raises(ValueError, match="too large"):
        cfg.validate_for(50)
    with pytest.raises(ValueError):
        TsneConfig(perplexity=0.0)


def test_perplexity_guard_blocks_projection():
    features, _ = two_blob_features(n=50)
    with pytest.raises(ValueError, match="too large"):
        tsne_project(features, TsneConfig())


# ------------------------------------------------------------- extraction

@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("feat")
    nd, dd = make_binary_corpus(root, n_nondef=6, n_def=4, size=32, seed=2)
    return load_binary_folders(nd, dd)


def test_extract_features_shape_and_determinism(toy_manifest):
    model = build_classifier(Backbone.RESNET50V2, pretrained=False, seed=0)
    fm1 = extract_features(toy_manifest, model, image_size=32)
    fm2 = extract_features(toy_manifest, model, image_size=32)
    assert fm1.n == len(toy_manifest)
    assert fm1.dim == 2048
    assert np.array_equal(fm1.vectors, fm2.vectors)
    assert fm1.paths == tuple(r.path for r in toy_manifest.records)


def test_extract_features_duplicate_image_gives_identical_rows(toy_manifest, tmp_path):
    import shutil

    rec = toy_manifest.records[0]
    twin = tmp_path / "twin.png"
    shutil.copy(rec.path, twin)
    dup = DatasetManifest(records=(
        rec, ImageRecord(path=str(twin), label=rec.label, source=rec.source),
    ))
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    fm = extract_features(dup, model, image_size=32)
    assert np.array_equal(fm.vectors[0], fm.vectors[1])


def test_extract_features_rejects_empty():
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    with pytest.raises(ValueError, match="empty"):
        extract_features(DatasetManifest(records=()), model)


def test_extract_features_categories(toy_manifest):
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    fm = extract_features(toy_manifest, model, image_size=32)
    assert set(fm.categories) <= set(CATEGORIES)
    n_def = sum(1 for c in fm.categories if c == CATEGORY_REAL_DEF)
    assert n_def == toy_manifest.count(label="defective")


# ------------------------------------------------------------- projection

def test_tsne_preserves_known_clusters():
    features, ids = two_blob_features(n=200, dim=64)
    emb = tsne_project(features, TsneConfig())
    assert emb.shape == (200, 2)
    assert np.isfinite(emb).all()
    assert silhouette_score(emb, ids) > 0.5


def test_tsne_same_seed_identical():
    features, _ = two_blob_features(n=120, dim=32)
    cfg = TsneConfig(perplexity=15.0, iterations=500)
    a = tsne_project(features, cfg)
    b = tsne_project(features, cfg)
    assert np.array_equal(a, b)


def test_tsne_permutation_row_correspondence():
    features, _ = two_blob_features(n=90, dim=20)
    cfg = TsneConfig(perplexity=10.0, iterations=500)
    base = tsne_project(features, cfg)

    rng = np.random.default_rng(1)
    perm = rng.permutation(features.n)
    shuffled = FeatureMatrix(
        vectors=features.vectors[perm],
        categories=tuple(features.categories[i] for i in perm),
        paths=tuple(features.paths[i] for i in perm),
    )
    moved = tsne_project(shuffled, cfg)
    assert np.allclose(moved, base[perm], atol=1e-8)


def test_projection_metadata_records_pca_decision():
    wide, _ = two_blob_features(n=100, dim=64)
    narrow, _ = two_blob_features(n=100, dim=20)
    cfg = TsneConfig(perplexity=10.0, iterations=500)
    meta_wide = projection_metadata(wide, cfg)
    meta_narrow = projection_metadata(narrow, cfg)
    assert meta_wide["pca_pre_reduction"] is True
    assert meta_wide["pca_components"] == 50
    assert meta_narrow["pca_pre_reduction"] is False
    assert meta_narrow["pca_components"] is None
    assert meta_wide["perplexity"] == 10.0
    assert meta_wide["method"] == "exact"


def test_duplicate_rows_do_not_produce_nan():
    rng = np.random.default_rng(0)
    row = rng.normal(size=(1, 16))
    vectors = np.vstack([np.repeat(row, 20, axis=0),
                         rng.normal(size=(20, 16)) + 4.0])
    fm = FeatureMatrix(
        vectors=vectors,
        categories=(CATEGORY_REAL_DEF,) * 40,
        paths=tuple(f"p{i}" for i in range(40)),
    )
    emb = tsne_project(fm, TsneConfig(perplexity=5.0, iterations=500))
    assert np.isfinite(emb).all()


# ------------------------------------------------------------------ plots

def test_plot_three_points(tmp_path):
    emb = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]])
    cats = (CATEGORY_REAL_NONDEF, CATEGORY_REAL_DEF, CATEGORY_SYNTH_DEF)
    out = plot_embedding(emb, cats, tmp_path / "tsne.png")
    assert out.is_file() and out.stat().st_size > 0


def test_plot_rejects_empty_and_mismatched(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        plot_embedding(np.zeros((0, 2)), (), tmp_path / "x.png")
    with pytest.raises(ValueError, match="rows"):
        plot_embedding(np.zeros((2, 2)), (CATEGORY_REAL_DEF,), tmp_path / "x.png")


def test_plot_full_corpus_has_three_legend_entries():
    import matplotlib.pyplot as plt

    rng = np.random.default_rng(0)
    emb = rng.normal(size=(332, 2))
    cats = ((CATEGORY_REAL_NONDEF,) * 209 + (CATEGORY_REAL_DEF,) * 63
            + (CATEGORY_SYNTH_DEF,) * 60)
    fig, ax = _build_figure(emb, cats)
    labels = [t.get_text() for t in ax.get_legend().get_texts()]
    plt.close(fig)
    assert labels == list(CATEGORIES)


def test_embedding_csv_round_trip(tmp_path):
    emb = np.array([[0.5, -1.5], [2.0, 3.0]])
    cats = (CATEGORY_REAL_NONDEF, CATEGORY_SYNTH_DEF)
    paths = ("a.png", "b.png")
    out = write_embedding_csv(emb, cats, paths, tmp_path / "emb.csv")
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "x,y,category,path"
    assert lines[1] == "0.5,-1.5,real_nondef,a.png"
    assert len(lines) == 3
    with pytest.raises(ValueError, match="align"):
        write_embedding_csv(emb, cats, ("only_one.png",), tmp_path / "bad.csv")
