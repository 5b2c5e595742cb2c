import pytest

import os

import numpy as np
import torch
import torch.nn as nn

from hita.errors import DataError, ShapeError, StateError, ValidationError
from hita.models import TokenRecord
import hita.quantizer as vq


def unit(x):
    return x / x.norm(dim=-1, keepdim=True)


def book_from(vectors, role='patch'):
    book = vq.Codebook(vectors.shape[0], vectors.shape[1], role).to(vectors.dtype)
    with torch.no_grad():
        book.vectors.copy_(vectors)
    return book


def test_quantizer_codebook_init():
    book = vq.Codebook(64, 8, 'holistic')
    norms = book.vectors.norm(dim=-1)
    assert torch.allclose(norms, torch.ones(64), atol=1e-5)
    assert book.usage_counts.sum() == 0


def test_quantizer_project_and_normalize():
    torch.manual_seed(0)
    projection = nn.Linear(32, 8)
    out = vq.project_and_normalize(torch.randn(4, 10, 32), projection)
    assert torch.allclose(out.norm(dim=-1), torch.ones(4, 10), atol=1e-5)


def test_quantizer_project_and_normalize_zero():
    projection = nn.Linear(32, 12)
    with torch.no_grad():
        projection.weight.zero_()
        projection.bias.zero_()
    out = vq.project_and_normalize(torch.zeros(1, 3, 32), projection)
    assert torch.isfinite(out).all()
    assert (out.norm(dim=-1) <= 1).all()


def test_quantizer_quantize_nearest_axis():
    book = book_from(torch.eye(2))
    inputs = unit(torch.tensor([[[0.9, 0.1]]]))
    tokens = vq.quantize_nearest(inputs, book)
    assert tokens.ids.tolist() == [[0]]
    assert book.usage_counts.tolist() == [1, 0]


def test_quantizer_quantize_nearest_fixed_point():
    torch.manual_seed(0)
    book = book_from(unit(torch.randn(16, 8)))
    tokens = vq.quantize_nearest(book.vectors.detach()[None, 5:6], book)
    assert tokens.ids.item() == 5
    assert torch.equal(tokens.codes.detach(), book.vectors.detach()[None, 5:6])


def test_quantizer_quantize_nearest_ties():
    book = book_from(torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
    inputs = unit(torch.tensor([[[1.0, 1.0]]]))
    assert vq.quantize_nearest(inputs, book).ids.item() == 0
    assert vq.quantize_nearest(torch.tensor([[[0.0, 1.0]]]), book).ids.item() == 1


@pytest.mark.parametrize('size', [16, 64, 256])
def test_quantizer_quantize_nearest_oracle(size):
    rng = np.random.RandomState(size)
    vectors = rng.randn(size, 8)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    inputs = rng.randn(1000, 8)
    inputs /= np.linalg.norm(inputs, axis=1, keepdims=True)

    expected = []
    for x in inputs:
        distances = [float(np.sum((x - c) ** 2)) for c in vectors]
        expected.append(int(np.argmin(distances)))

    book = book_from(torch.from_numpy(vectors))
    tokens = vq.quantize_nearest(torch.from_numpy(inputs)[None], book)
    assert tokens.ids[0].tolist() == expected
    assert torch.equal(tokens.codes.detach()[0], book.vectors.detach()[tokens.ids[0]])


def test_quantizer_cosine_equivalence():
    torch.manual_seed(1)
    book = book_from(unit(torch.randn(64, 12)))
    inputs = unit(torch.randn(1, 200, 12))
    cosine_ids = (inputs[0] @ book.vectors.detach().t()).argmax(dim=-1)
    assert torch.equal(vq.quantize_nearest(inputs, book).ids[0], cosine_ids)


def test_quantizer_idempotence():
    torch.manual_seed(2)
    book = book_from(unit(torch.randn(32, 8)))
    tokens = vq.quantize_nearest(unit(torch.randn(2, 10, 8)), book)
    again = vq.quantize_nearest(tokens.codes.detach(), book)
    assert torch.equal(tokens.ids, again.ids)


def test_quantizer_quantize_nearest_shape():
    with pytest.raises(ShapeError):
        vq.quantize_nearest(torch.randn(1, 2, 4), vq.Codebook(8, 8, 'patch'))


def test_quantizer_straight_through_forward():
    pre = torch.randn(3, 5, 8, requires_grad=True)
    codes = torch.randn(3, 5, 8)
    out = vq.straight_through(pre, codes)
    assert torch.equal(out, codes)

    out.sum().backward()
    assert torch.equal(pre.grad, torch.ones_like(pre))


def test_quantizer_straight_through_shape():
    with pytest.raises(ShapeError):
        vq.straight_through(torch.randn(2, 8), torch.randn(2, 4))


def test_quantizer_straight_through_quadratic():
    torch.manual_seed(3)
    target = torch.randn(50, 8, dtype=torch.float64)
    pre = torch.randn(50, 8, dtype=torch.float64, requires_grad=True)
    codes = torch.randn(50, 8, dtype=torch.float64)

    loss = ((vq.straight_through(pre, codes) - target) ** 2).sum()
    loss.backward()

    # with codes held fixed, f is evaluated at the codes
    step = 1e-3
    for probe in range(50):
        row, col = probe, probe % 8
        plus, minus = codes.clone(), codes.clone()
        plus[row, col] += step
        minus[row, col] -= step
        numeric = float(((plus - target) ** 2).sum() - ((minus - target) ** 2).sum()) / (2 * step)
        analytic = float(pre.grad[row, col])
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(analytic))


def test_quantizer_vq_loss_fixed_point():
    codes = torch.randn(2, 4, 8)
    assert float(vq.vq_loss(codes.clone(), codes, 0.25)) == 0.0


def test_quantizer_vq_loss_oracle():
    torch.manual_seed(4)
    pre = torch.randn(2, 3, 4, dtype=torch.float64)
    codes = torch.randn(2, 3, 4, dtype=torch.float64)
    beta = 0.25

    total, count = 0.0, 0
    for b in range(2):
        for l in range(3):
            d = sum((float(pre[b, l, i]) - float(codes[b, l, i])) ** 2 for i in range(4))
            total += d + beta * d
            count += 1
    assert abs(float(vq.vq_loss(pre, codes, beta)) - total / count) < 1e-9

    codebook_only = float(vq.vq_loss(pre, codes, 0.0))
    assert abs(codebook_only - total / count / (1 + beta)) < 1e-9


def test_quantizer_vq_loss_stop_gradients():
    pre = torch.randn(2, 3, 4, requires_grad=True)
    codes = torch.randn(2, 3, 4, requires_grad=True)

    codebook_term = vq.vq_loss(pre, codes, 0.0)
    grad_pre, grad_codes = torch.autograd.grad(codebook_term, [pre, codes], allow_unused=True)
    assert grad_pre is None or torch.all(grad_pre == 0)
    assert grad_codes.abs().sum() > 0

    commitment = vq.vq_loss(pre, codes, 1.0) - vq.vq_loss(pre, codes, 0.0)
    grad_pre, grad_codes = torch.autograd.grad(commitment, [pre, codes], allow_unused=True)
    assert grad_codes is None or torch.all(grad_codes == 0)
    assert grad_pre.abs().sum() > 0


def test_quantizer_usage_stats():
    book = vq.Codebook(64, 8, 'patch')
    with pytest.raises(StateError):
        vq.usage_stats(book)

    vq.quantize_nearest(book.vectors.detach()[None, 7:8].repeat(1, 5, 1), book)
    assert vq.usage_stats(book) == 1.0 / 64
    assert vq.codebook_perplexity(book) == pytest.approx(1.0)

    vq.quantize_nearest(book.vectors.detach()[None], book)
    assert vq.usage_stats(book) == 1.0

    book.reset_usage()
    with pytest.raises(StateError):
        vq.usage_stats(book)


def test_quantizer_reseed_dead_codes():
    torch.manual_seed(5)
    book = vq.Codebook(8, 4, 'patch')
    vq.quantize_nearest(book.vectors.detach()[None, :2], book)
    batch = unit(torch.randn(1, 10, 4))
    assert vq.reseed_dead_codes(book, batch) == 6
    assert torch.allclose(book.vectors.norm(dim=-1), torch.ones(8), atol=1e-5)


def test_quantizer_reseed_farthest_first():
    book = book_from(torch.tensor([[1.0, 0.0], [0.6, 0.8], [0.8, 0.6], [0.0, -1.0]]))
    vq.quantize_nearest(torch.tensor([[[1.0, 0.0]]]), book)
    inputs = torch.tensor([[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]])

    assert vq.reseed_dead_codes(book, inputs, threshold=0.5) == 2
    assert torch.allclose(book.vectors.detach()[1], torch.tensor([-1.0, 0.0]))
    assert torch.allclose(book.vectors.detach()[2], torch.tensor([0.0, 1.0]))
    # covered inputs leave the last dead code alone
    assert torch.allclose(book.vectors.detach()[3], torch.tensor([0.0, -1.0]))


def test_quantizer_reseed_threshold():
    torch.manual_seed(5)
    book = vq.Codebook(8, 4, 'patch')
    vq.quantize_nearest(book.vectors.detach()[None, :2], book)
    before = book.vectors.detach().clone()
    assert vq.reseed_dead_codes(book, unit(torch.randn(1, 10, 4)), threshold=4.0) == 0
    assert torch.equal(book.vectors.detach(), before)


def test_quantizer_reseed_no_live_codes():
    book = vq.Codebook(4, 2, 'holistic')
    inputs = torch.tensor([[[1.0, 0.0], [-1.0, 0.0]]])
    assert vq.reseed_dead_codes(book, inputs) == 2
    assert sorted(book.vectors.detach()[:2, 0].tolist()) == [-1.0, 1.0]


def test_quantizer_quantize_nearest_bounded_chunks():
    torch.manual_seed(8)
    book = book_from(unit(torch.randn(256, 8)))
    inputs = unit(torch.randn(1, 300, 8))
    reference = vq.quantize_nearest(inputs, book, track=False).ids
    # one row per chunk once the buffer cap is below N x D
    small = vq.quantize_nearest(inputs, book, track=False, max_elements=100).ids
    assert torch.equal(small, reference)


def test_quantizer_books_independent():
    torch.manual_seed(6)
    holistic = vq.VectorQuantizer(32, 12, 64, 'holistic')
    patch = vq.VectorQuantizer(32, 8, 64, 'patch')
    before = holistic.book.vectors.detach().clone()

    optimizer = torch.optim.SGD(patch.parameters(), lr=0.1)
    _, _, expanded, loss = patch(torch.randn(2, 16, 32), beta=0.25)
    (loss + expanded.pow(2).mean()).backward()
    optimizer.step()
    patch.book.renormalize()

    assert torch.equal(holistic.book.vectors.detach(), before)
    assert torch.allclose(patch.book.vectors.norm(dim=-1), torch.ones(64), atol=1e-5)


def test_quantizer_dequantize_range():
    quantizer = vq.VectorQuantizer(32, 8, 16, 'patch')
    assert tuple(quantizer.dequantize(torch.tensor([[0, 15]])).shape) == (1, 2, 32)
    with pytest.raises(ValidationError):
        quantizer.dequantize(torch.tensor([[16]]))


def test_quantizer_token_dump(tmpdir):
    path = os.path.join(str(tmpdir), 'tokens.bin')
    fingerprint = 0xdeadbeef
    records = [TokenRecord(2, 4, 64, fingerprint, 3, [1, 63], [0, 5, 6, 7]),
               TokenRecord(2, 4, 64, fingerprint, -1, [2, 2], [9, 9, 9, 9])]
    vq.write_token_dump(path, records)

    assert os.path.getsize(path) == 2 * (5 + 6) * 4
    raw = np.fromfile(path, dtype='<i4')
    assert raw[:3].tolist() == [2, 4, 64]

    loaded = vq.read_token_dump(path, fingerprint=fingerprint)
    assert [dict(r) for r in loaded] == [dict(r) for r in records]

    with pytest.raises(DataError):
        vq.read_token_dump(path, fingerprint=1)


def test_quantizer_token_dump_truncated(tmpdir):
    path = os.path.join(str(tmpdir), 'tokens.bin')
    vq.write_token_dump(path, [TokenRecord(2, 4, 64, 1, 0, [1, 2], [3, 4, 5, 6])])
    with open(path, 'ab') as fp:
        fp.write(np.asarray([2, 4, 64], dtype='<i4').tobytes())
    with pytest.raises(DataError):
        vq.read_token_dump(path)
