import numpy as np
import pytest
import torch

import oracle
from cognet.encoders import SetEncoder, encode_set, visit_condition_vectors
from cognet.layers import GatedAggregation, init_parameters


def make(seed=0, dim=8, heads=2):
    enc, gd, gp = SetEncoder(dim, heads), GatedAggregation(dim, 4), GatedAggregation(dim, 4)
    for i, m in enumerate((enc, gd, gp)):
        init_parameters(m, dim, seed + i)
    table = torch.as_tensor(np.random.default_rng(seed).normal(size=(10, dim)))
    return enc, gd, gp, table


def params(module, prefix=""):
    return {prefix + k: v.detach().numpy() for k, v in module.state_dict().items()}


def test_single_code_matches_oracle():
    enc, _, _, table = make()
    out = encode_set(torch.tensor([3]), table, enc)
    expected = oracle.encoder(params(enc), "", table[[3]].numpy(), 2)
    np.testing.assert_allclose(out.detach().numpy(), expected, rtol=0, atol=1e-9)


def test_set_matches_oracle():
    enc, _, _, table = make(seed=4)
    ids = [1, 7, 2, 9]
    out = encode_set(torch.tensor(ids), table, enc)
    expected = oracle.encoder(params(enc), "", table[ids].numpy(), 2)
    np.testing.assert_allclose(out.detach().numpy(), expected, rtol=0, atol=1e-9)


def test_permutation_equivariance():
    enc, _, _, table = make(seed=1)
    ids = torch.tensor([0, 4, 6, 8])
    perm = torch.tensor([2, 0, 3, 1])
    out = encode_set(ids, table, enc)
    torch.testing.assert_close(encode_set(ids[perm], table, enc), out[perm])


def test_identical_sets_identical_output():
    enc, _, _, table = make(seed=2)
    a = encode_set(torch.tensor([1, 2]), table, enc)
    b = encode_set(torch.tensor([1, 2]), table, enc)
    assert torch.equal(a, b)


def test_padding_does_not_leak():
    enc, _, _, table = make(seed=3)
    ids = torch.tensor([[1, 5, 0]])
    mask = torch.tensor([[True, True, False]])
    padded = encode_set(ids, table, enc, mask)[0, :2]
    torch.testing.assert_close(padded, encode_set(torch.tensor([1, 5]), table, enc))


def test_out_of_range_id():
    enc, _, _, table = make()
    with pytest.raises(IndexError):
        encode_set(torch.tensor([10]), table, enc)


def test_condition_vectors_single_and_duplicate_rows():
    _, gd, gp, _ = make()
    d = torch.as_tensor(np.random.default_rng(0).normal(size=(1, 8)))
    row = torch.as_tensor(np.random.default_rng(1).normal(size=(1, 8)))
    vd, vp = visit_condition_vectors(d, row.repeat(2, 1), gd, gp)
    torch.testing.assert_close(vd, d[0])
    torch.testing.assert_close(vp, row[0])


def test_condition_vectors_match_oracle():
    _, gd, gp, _ = make(seed=5)
    rng = np.random.default_rng(5)
    d, p = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    vd, vp = visit_condition_vectors(torch.as_tensor(d), torch.as_tensor(p), gd, gp)
    np.testing.assert_allclose(vd.detach().numpy(), oracle.gated(params(gd), "", d), rtol=0, atol=1e-9)
    np.testing.assert_allclose(vp.detach().numpy(), oracle.gated(params(gp), "", p), rtol=0, atol=1e-9)


def test_encode_aggregate_gradient():
    enc, gd, _, table = make(seed=6)
    table = table.clone().requires_grad_(True)
    ids = torch.tensor([0, 3, 5])
    w = torch.as_tensor(np.random.default_rng(6).normal(size=8))

    def f(tab):
        return gd(encode_set(ids, tab, enc)) @ w

    assert torch.autograd.gradcheck(f, (table,), eps=1e-5, atol=1e-8, rtol=1e-4)
