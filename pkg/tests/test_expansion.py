import json
import pickle

import numpy as np
import pytest

from fairfedgnn import expansion as xp
from fairfedgnn.model import LocalSubgraph
from fairfedgnn.verify import digest_join, plaintext_join, random_interactions

KEY = bytes(range(32))


def _clients(items_by_user, key=KEY):
    return {u: xp.ExpansionClient(items, key, bytes([u]) * 16) for u, items in items_by_user.items()}


def test_same_item_same_key_same_digest():
    assert xp.encrypt_item_ids([42], KEY) == xp.encrypt_item_ids([42], KEY)
    assert xp.encrypt_item_ids([42], KEY) != xp.encrypt_item_ids([42], bytes(32))


def test_empty_item_set():
    assert xp.encrypt_item_ids([], KEY) == set()


def test_hundred_ids_hundred_digests():
    ids = np.random.default_rng(0).choice(10**9, size=100, replace=False)
    digests = xp.encrypt_item_ids(ids, KEY)
    assert len(digests) == 100
    assert all(len(d) == xp.DIGEST_BYTES for d in digests)


def test_encrypted_id_rejects_bad_width():
    with pytest.raises(xp.ProtocolError):
        xp.EncryptedItemId(b"short")


def test_three_client_join():
    clients = _clients({0: [7, 8], 1: [7], 2: [9]})
    emb = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]), 2: np.array([5.0, 5.0])}
    server = xp.ExpansionServer(2, rng=np.random.default_rng(0))
    maps = server.update_mapping([c.upload(emb[u]) for u, c in clients.items()])
    x = xp.encrypt_item_ids([7], KEY).pop()
    np.testing.assert_array_equal(maps[clients[0].tag].embeddings(x), [emb[1]])
    np.testing.assert_array_equal(maps[clients[1].tag].embeddings(x), [emb[0]])
    assert all(len(s) == 0 for s in maps[clients[2].tag].neighbors.values())
    # client 0's other item has no co-rater
    y = xp.encrypt_item_ids([8], KEY).pop()
    assert len(maps[clients[0].tag].neighbors[y]) == 0


def test_single_client_gets_no_neighbors():
    c = xp.ExpansionClient([1, 2, 3], KEY, b"a" * 16)
    server = xp.ExpansionServer(3, rng=np.random.default_rng(0))
    mp = server.update_mapping([c.upload(np.ones(3))])[c.tag]
    assert len(mp) == 3
    assert all(len(s) == 0 for s in mp.neighbors.values())


def test_round_one_digests_match_round_two_newcomers():
    old = xp.ExpansionClient([5], KEY, b"o" * 16)
    server = xp.ExpansionServer(2, rng=np.random.default_rng(0))
    server.update_mapping([old.upload(np.array([1.0, 2.0]))])
    new = xp.ExpansionClient([5], KEY, b"n" * 16)
    up_old = old.upload(np.array([3.0, 4.0]))
    assert up_old.new_encrypted_ids == []
    maps = server.update_mapping([up_old, new.upload(np.array([9.0, 9.0]))])
    d = xp.encrypt_item_ids([5], KEY).pop()
    np.testing.assert_array_equal(maps[new.tag].embeddings(d), [[3.0, 4.0]])  # latest embedding
    np.testing.assert_array_equal(maps[old.tag].embeddings(d), [[9.0, 9.0]])


def test_board_slots_reshuffle_between_rounds():
    clients = _clients({u: [1] for u in range(12)})
    server = xp.ExpansionServer(1, rng=np.random.default_rng(4))
    emb = {u: np.array([float(u)]) for u in clients}
    first = server.update_mapping([c.upload(emb[u]) for u, c in clients.items()])
    second = server.update_mapping([c.upload(emb[u]) for u, c in clients.items()])
    assert not np.array_equal(first[clients[0].tag].board, second[clients[0].tag].board)
    d = xp.encrypt_item_ids([1], KEY).pop()
    got = sorted(second[clients[0].tag].embeddings(d).ravel())
    assert got == [float(u) for u in range(1, 12)]


def test_store_holds_no_plaintext():
    user_ids = [101, 202, 303]
    items = {101: [11, 12], 202: [12, 13], 303: [13, 11]}
    clients = {u: xp.ExpansionClient(items[u], KEY, np.random.default_rng(u).bytes(16)) for u in user_ids}
    server = xp.ExpansionServer(2, rng=np.random.default_rng(0))
    server.update_mapping([c.upload(np.zeros(2)) for c in clients.values()])
    contents = server.contents()
    assert all(isinstance(d, xp.EncryptedItemId) for d in contents["digests"])
    assert set(contents["pseudonyms"]).isdisjoint(set(user_ids))
    blob = pickle.dumps(contents) + json.dumps([d.hex() for d in contents["digests"]]).encode()
    for value in user_ids + [11, 12, 13]:
        for raw in (value.to_bytes(8, "little"), str(value).encode()):
            assert raw not in blob


def test_inductive_upload_counts():
    c = xp.ExpansionClient([1, 2], KEY, b"c" * 16)
    assert len(c.upload(np.zeros(1)).new_encrypted_ids) == 2
    assert len(c.upload(np.zeros(1)).new_encrypted_ids) == 0
    c.set_items([2, 3])
    assert len(c.upload(np.zeros(1)).new_encrypted_ids) == 1
    assert c.uploaded_total == 3


def test_digest_join_equals_plaintext_join():
    rng = np.random.default_rng(9)
    for f in range(3):
        ratings = random_interactions(rng, 40, 20, 0.15)
        assert digest_join(ratings, KEY, f) == plaintext_join(ratings)


def _local(dim=2):
    return LocalSubgraph(0, np.array([0, 1]), np.array([4.0, 3.0]), np.empty((0, dim)), dim)


def test_expand_empty_mapping_is_identity():
    local = _local()
    mp = xp.MappingDict({}, np.empty((0, 2)))
    assert xp.expand_subgraph(local, mp) is local


def test_expand_one_neighbor():
    c_me = xp.ExpansionClient([0], KEY, b"m" * 16)
    c_nb = xp.ExpansionClient([0], KEY, b"n" * 16)
    server = xp.ExpansionServer(2, rng=np.random.default_rng(0))
    maps = server.update_mapping([c_me.upload(np.zeros(2)), c_nb.upload(np.array([0.5, -0.5]))])
    g = xp.expand_subgraph(_local(), maps[c_me.tag])
    assert g.r == 1
    np.testing.assert_array_equal(g.neighbors, [[0.5, -0.5]])
    np.testing.assert_array_equal(g.items, [0, 1])


def test_expand_dedups_neighbors_across_items():
    # me: items 0,1. A rates 0 and 1, B rates 0, C rates 1 -> joins {0: A,B; 1: A,C}
    # union of neighbors = {A, B, C}; A appears once
    ratings = {"me": [0, 1], "A": [0, 1], "B": [0], "C": [1]}
    emb = {"me": [0.0, 0.0], "A": [1.0, 0.0], "B": [0.0, 1.0], "C": [1.0, 1.0]}
    clients = {k: xp.ExpansionClient(v, KEY, k.encode() * 16) for k, v in ratings.items()}
    server = xp.ExpansionServer(2, rng=np.random.default_rng(3))
    maps = server.update_mapping([c.upload(np.array(emb[k])) for k, c in clients.items()])
    mp = maps[clients["me"].tag]
    assert sum(len(s) for s in mp.neighbors.values()) == 4
    g = xp.expand_subgraph(_local(), mp)
    assert g.r == 3
    assert sorted(map(tuple, g.neighbors)) == sorted(tuple(emb[k]) for k in "ABC")


def test_expand_cap_subsamples():
    clients = _clients({u: [0] for u in range(10)})
    server = xp.ExpansionServer(2, rng=np.random.default_rng(0))
    maps = server.update_mapping([c.upload(np.full(2, u)) for u, c in clients.items()])
    g = xp.expand_subgraph(_local(), maps[clients[0].tag], cap=4, rng=np.random.default_rng(1))
    assert g.r == 4
    assert len({tuple(r) for r in g.neighbors}) == 4


def test_wrong_embedding_length_is_protocol_error():
    server = xp.ExpansionServer(3, rng=np.random.default_rng(0))
    with pytest.raises(xp.ProtocolError):
        server.receive([xp.ExpansionUpload(b"x" * 16, [], np.zeros(2))])
    with pytest.raises(xp.ProtocolError):
        xp.expand_subgraph(_local(2), xp.MappingDict({}, np.zeros((1, 3))))


def test_histogram_dump(tmp_path):
    clients = _clients({0: [1, 2], 1: [2]})
    server = xp.ExpansionServer(1, rng=np.random.default_rng(0))
    server.update_mapping([c.upload(np.zeros(1)) for c in clients.values()])
    out = tmp_path / "h.csv"
    server.dump_histogram(out)
    rows = out.read_text().splitlines()
    assert rows[0] == "digest,holders"
    assert sorted(r.split(",")[1] for r in rows[1:]) == ["1", "2"]
