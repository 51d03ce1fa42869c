import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliasim import env as E
from aliasim import dataset as D


@pytest.fixture(scope="module")
def corpus():
    return D.generate_corpus(E.make_task("crossing_path"), 6, seed=2)


def test_round_robin_balance():
    spec = E.make_task("crossing_path")
    c = D.generate_corpus(spec, 100, seed=0)
    assert D.intent_counts(c, 2) == [50, 50]
    assert D.generate_corpus(spec, 1, seed=9)[0].success
    with pytest.raises(ValueError):
        D.generate_corpus(spec, 0)


def test_history_padding(corpus):
    obs = corpus[0].observations
    h0 = D.history_window(obs, 0, 16)
    assert h0.shape == (16, obs.shape[1])
    np.testing.assert_array_equal(h0, np.repeat(obs[:1], 16, axis=0))
    h5 = D.history_window(obs, 5, 16)
    np.testing.assert_array_equal(h5[-5:], obs[0:5])
    np.testing.assert_array_equal(h5[:11], np.repeat(obs[:1], 11, axis=0))


def test_chunk_padding_and_count(corpus):
    spec = E.make_task("crossing_path")
    ep = corpus[0]
    b = D.chunkify([ep], K=16, H=8, spec=spec)
    assert len(b) == 80
    last = b.chunk[-1]
    np.testing.assert_array_equal(last, np.repeat(ep.actions[-1:], 8, axis=0))
    np.testing.assert_array_equal(b.chunk[72], ep.actions[72:80])
    assert b.history.shape == (80, 16, spec.obs_dim)


def test_chunk_reconstruction(corpus):
    spec = E.make_task("crossing_path")
    for H in (4, 8, 7):
        b = D.chunkify(corpus[:2], K=16, H=H, stride=H, spec=spec)
        for e, ep in enumerate(corpus[:2]):
            rebuilt = np.concatenate(list(b.chunk[b.episode == e]))
            np.testing.assert_array_equal(rebuilt[:len(ep)], ep.actions)


def test_instruction_never_carries_intent(corpus):
    spec = E.make_task("crossing_path")
    b = D.chunkify(corpus, spec=spec)
    assert set(np.unique(b.z)) == {0, 1}
    assert np.unique(b.instruction).tolist() == [spec.instruction]


def test_in_ambiguity_flags_follow_windows(corpus):
    spec = E.make_task("crossing_path")
    b = D.chunkify(corpus[:1], spec=spec)
    (a, e), = corpus[0].windows
    expected = np.zeros(len(b), dtype=bool)
    expected[a:e + 1] = True
    np.testing.assert_array_equal(b.in_ambiguity, expected)


def test_chunkify_validates_and_skips_empty(corpus):
    with pytest.raises(ValueError):
        D.chunkify(corpus, K=0)
    empty = D.EpisodeRecord("crossing_path", 0, np.zeros((0, 11)), np.zeros((0, 3)),
                            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    b = D.chunkify([empty, corpus[0]], spec=E.make_task("crossing_path"))
    assert len(b) == len(corpus[0])


def test_balance_within_episode_len():
    for fam in ("multi_goal", "bimanual"):
        spec = E.make_task(fam)
        b = D.chunkify(D.generate_corpus(spec, 7, seed=1), spec=spec)
        counts = np.bincount(b.z, minlength=spec.num_intents)
        assert counts.max() - counts.min() <= spec.episode_len


def test_corpus_round_trip(tmp_path, corpus):
    p = tmp_path / "c.bin"
    D.save_corpus(corpus, p)
    back = D.load_corpus(p)
    assert back == corpus
    D.save_corpus(corpus, tmp_path / "again.bin")
    assert p.read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_empty_corpus_file(tmp_path):
    D.save_corpus([], tmp_path / "e.bin")
    assert D.load_corpus(tmp_path / "e.bin") == []


def test_samples_round_trip(tmp_path, corpus):
    b = D.chunkify(corpus[:2], spec=E.make_task("crossing_path"))
    D.save_samples(b, tmp_path / "s.bin")
    back = D.load_samples(tmp_path / "s.bin")
    for k in D._BATCH_FIELDS:
        np.testing.assert_array_equal(getattr(back, k), getattr(b, k))
        assert getattr(back, k).dtype == getattr(b, k).dtype


@pytest.mark.parametrize("damage", ["magic", "truncate", "payload", "version", "trailing"])
def test_corrupt_files_are_rejected(tmp_path, corpus, damage):
    p = tmp_path / "c.bin"
    D.save_corpus(corpus[:2], p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[0:8] = b"NOTMAGIC"
    elif damage == "truncate":
        raw = raw[:-10]
    elif damage == "payload":
        raw[len(raw) // 2] ^= 0xFF
    elif damage == "version":
        raw[8] = 99
    else:
        raw += b"\x00"
    p.write_bytes(bytes(raw))
    with pytest.raises(D.FormatError):
        D.load_corpus(p)


def test_manifest(tmp_path):
    spec = E.make_task("bimanual")
    D.write_manifest(tmp_path / "m.json", ["c.bin"], spec, 3, 10, {"k": 1})
    m = D.read_manifest(tmp_path / "m.json")
    assert m["files"] == ["c.bin"] and m["generation"] == {"seed": 3, "episodes": 10}
    assert E.TaskSpec.from_dict(m["task_specs"][0]) == spec


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 60), st.integers(1, 20))
def test_window_shapes(K, t, H):
    obs = np.arange(50, dtype=float)[:, None]
    h = D.history_window(obs, min(t, 49), K)
    c = D.chunk_window(obs, min(t, 49), H)
    assert h.shape == (K, 1) and c.shape == (H, 1)
    # oldest first, never from the future
    assert (np.diff(h[:, 0]) >= 0).all() and h.max() < max(min(t, 49), 1)
