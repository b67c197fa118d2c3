import heapq

import pytest

from relchain import contracts, crypto
from relchain.node import Node, NodeStorage, TimingModel
from relchain.ordering import OrdererConfig, Sequencer
from relchain.store import MVStore, TableSchema


class StubEnv:
    """Synchronous stand-in for the simulator environment: scheduled
    callbacks are queued and run via drain()."""

    def __init__(self):
        self.t = 0.0
        self.heap = []
        self.counter = 0
        self.to_orderer = []
        self.to_nodes = []
        self.notifications = []
        self.alarms = []

    def now(self):
        return self.t

    def schedule(self, delay, fn):
        heapq.heappush(self.heap, (self.t + delay, self.counter, fn))
        self.counter += 1

    def drain(self):
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            self.t = t
            fn()

    def send_to_node(self, dst, msg):
        self.to_nodes.append((dst, msg))

    def send_to_orderer(self, msg):
        self.to_orderer.append(msg)

    def notify_client(self, gid, status, node_id):
        self.notifications.append((gid, status, node_id))

    def raise_alarm(self, height, divergent, detected_by):
        self.alarms.append((height, tuple(divergent), detected_by))


def kv_schema():
    return TableSchema("kv", (("k", "integer"), ("v", "integer")), ("k",))


def fresh_store(seed_keys=()):
    store = MVStore()
    store.create_table(kv_schema())
    for k in seed_keys:
        store.seed_row("kv", {"k": k, "v": 0})
    return store


USER_KEY = crypto.KeyPair.from_seed("test:user")
NODE_KEY = crypto.KeyPair.from_seed("test:node")
ORDERER_KEY = crypto.KeyPair.from_seed("test:orderer")

CERTS = {
    "alice": {"org": "org0", "roles": ["client", "admin"], "pub": USER_KEY.public_bytes},
    "bob": {"org": "org1", "roles": ["client"], "pub": USER_KEY.public_bytes},
}


def make_node(flow="oe", env=None, storage=None, **kw):
    env = env or StubEnv()
    node = Node(
        node_id="n0",
        org="org0",
        flow=flow,
        env=env,
        key=NODE_KEY,
        orderer_pub=ORDERER_KEY.public_bytes,
        schemas=contracts.default_schemas(),
        seed_rows=[("kv", {"k": k, "v": 0}) for k in range(5)],
        certs=CERTS,
        node_pubs={"n0": NODE_KEY.public_bytes},
        storage=storage or NodeStorage(),
        timing=TimingModel(),
        **kw,
    )
    return node, env


def make_sequencer(block_size=10, timeout=100.0):
    return Sequencer(OrdererConfig(block_size, timeout), ORDERER_KEY)


@pytest.fixture
def seq():
    return make_sequencer()
