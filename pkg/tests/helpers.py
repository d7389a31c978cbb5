"""Independent oracles used across the test suite."""

import numpy as np

from kprn.diffmath import backward


def central_difference(fn, arrays, h=1e-5):
    """Numerical gradient of the scalar ``fn(arrays)`` w.r.t. each array,
    perturbing one entry at a time. ``fn`` receives plain float arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn(arrays)
            arr[idx] = orig - h
            down = fn(arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_store_gradients(loss_fn, store, h=1e-5, names=None, max_entries=None, rng=None):
    """Compare ``backward`` against central differences for every parameter
    in ``store`` (or ``names``). ``loss_fn()`` rebuilds the graph from the
    store's current values. Returns the worst relative error.

    With ``max_entries`` only that many randomly chosen entries per tensor are
    probed, which keeps wide layers affordable.
    """
    analytic = backward(loss_fn(), store)
    worst = 0.0
    for name in names or store.names():
        t = store[name]
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, max_rel_error(a_flat[i], num))
    return worst


# --------------------------------------------------------------------------
# Op catalogue for gradient checks
# --------------------------------------------------------------------------

from kprn import diffmath as dm  # noqa: E402


def grad_of(fn, *arrays):
    """Analytic gradients of fn(*tensors) w.r.t. each input array."""
    ts = [dm.variable(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    g = dm.backward(out, {str(k): t for k, t in enumerate(ts)})
    return [g[str(k)] for k in range(len(ts))]


def numeric_of(fn, *arrays):
    arrays = [np.array(a, dtype=float) for a in arrays]
    return central_difference(lambda arrs: fn(*[dm.constant(a) for a in arrs]).item(), arrays)


# Every catalog op, reduced to a scalar with a fixed random projection so the
# upstream gradient is not trivially uniform.
rng0 = np.random.default_rng(11)
PROJ = rng0.normal(size=(8, 8))


def _proj(t):
    r, c = (t.shape + (1,))[:2] if t.data.ndim == 1 else t.shape
    w = dm.constant(PROJ[:r, :c].reshape(t.shape))
    return dm.total(dm.mul(t, w))


OP_CASES = {
    "matmul": (lambda a, b: _proj(dm.matmul(a, b)), [(3, 4), (4, 5)]),
    "add": (lambda a, b: _proj(dm.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: _proj(dm.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: _proj(dm.mul(a, b)), [(3, 4), (1, 4)]),
    "scale": (lambda a: _proj(dm.scale(a, -2.5)), [(2, 3)]),
    "concat": (lambda a, b: _proj(dm.concat([a, b])), [(3, 2), (3, 4)]),
    "concat_rows": (lambda a, b: _proj(dm.concat([a, b], axis=0)), [(2, 3), (1, 3)]),
    "relu": (lambda a: _proj(dm.relu(a)), [(4, 4)]),
    "sigmoid": (lambda a: _proj(dm.sigmoid(a)), [(4, 4)]),
    "softplus": (lambda a: _proj(dm.softplus(a)), [(4, 4)]),
    "tanh": (lambda a: _proj(dm.tanh(a)), [(4, 4)]),
    "softmax": (lambda a: _proj(dm.softmax(a)), [(3, 5)]),
    "log_softmax": (lambda a: _proj(dm.log_softmax(a)), [(3, 5)]),
    "mean": (lambda a: dm.mean(dm.mul(a, a)), [(3, 4)]),
    "sum": (lambda a: dm.total(dm.tanh(a)), [(5,)]),
    "mse": (lambda a, b: dm.mse(a, b), [(6,), (6,)]),
    "weighted_bce": (
        lambda a: dm.weighted_bce(a, np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.5, 2.0, 1.0, 3.0])),
        [(4,)],
    ),
    "nll_log_softmax": (lambda a: dm.nll_log_softmax(a, [0, 3, 2]), [(3, 5)]),
    "embedding": (lambda a: _proj(dm.embedding(a, [2, 0, 2])), [(4, 3)]),
    "slice_last": (lambda a: _proj(dm.slice_last(a, 1, 4)), [(2, 6)]),
    "reshape": (lambda a: _proj(dm.reshape(a, (3, 4))), [(4, 3)]),
}


# --------------------------------------------------------------------------
# Tiny models and random scenes
# --------------------------------------------------------------------------

from pathlib import Path  # noqa: E402

from kprn import querylang as ql  # noqa: E402
from kprn.model import KPRN, ModelDims  # noqa: E402
from kprn.scene import BBox, ProposalRecord, QueryRecord, SceneRecord  # noqa: E402
from kprn.wordvec import load_embeddings  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
TINY_DIMS = ModelDims(word_embed=4, enc_hidden=3, att_hidden=5, rvis=6, dec_hidden=4)
CATEGORIES = ("car", "person", "dog", "square")


def fixture_table():
    return load_embeddings(FIXTURES / "embeddings16.txt")


def random_scene(rng, n, c3_dim=3, c4_dim=4, size=200.0, image_id="s"):
    props = []
    for i in range(n):
        x, y = rng.uniform(0, size - 40, 2)
        w, h = rng.uniform(8, 40, 2)
        props.append(
            ProposalRecord(
                i,
                BBox(x, y, x + w, y + h),
                str(rng.choice(CATEGORIES)),
                rng.normal(size=c3_dim),
                rng.normal(size=c4_dim),
            )
        )
    return SceneRecord(image_id, size, size, props)


def query(text, gt_box=None):
    tokens = ql.tokenize(text)
    parsed = ql.parse_attributes(tokens)
    return QueryRecord(tokens, parsed.slots(), parsed.attr_labels, gt_box)


def tiny_model(vocab_words=("red", "car", "left", "of", "dog", "big", "person"), attr=("big", "red"),
               seed=0, scale=3.0, c3_dim=3, c4_dim=4, dims=TINY_DIMS, table=None):
    """Small model with parameters spread wider than the default init so that
    scores differ visibly between proposals."""
    model = KPRN(
        ql.Vocab(sorted(vocab_words)),
        table or fixture_table(),
        c3_dim,
        c4_dim,
        dims=dims,
        attr_labels=list(attr),
        attr_freqs=[0.25] * len(attr) if attr else [],
        seed=seed,
    )
    rng = np.random.default_rng(seed + 100)
    for name, t in model.params.items():
        model.params.assign(name, rng.uniform(-1, 1, size=t.shape) * scale / np.sqrt(max(t.shape[0], 1)))
    return model


# --------------------------------------------------------------------------
# Acceptance reporting
# --------------------------------------------------------------------------

from contextlib import contextmanager  # noqa: E402

ACCEPTANCE_LINES = []


@contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line for an acceptance criterion; the line is
    printed immediately and repeated in the terminal summary."""
    detail = {}
    try:
        yield detail
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        extra = "  " + ", ".join(f"{k}={v}" for k, v in detail.items()) if detail else ""
        line = f"{status} criterion {number}: {title}{extra}"
        ACCEPTANCE_LINES.append(line)
        print(line)
