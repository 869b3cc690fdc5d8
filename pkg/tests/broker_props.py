"""Randomized delivery-guarantee checks against a live in-process broker.

Each check returns a list of violation strings (empty means the property held).
"""
import asyncio
import random

from portpipe.broker import Broker, BrokerClient


def _payload(i: int) -> bytes:
    return b"m%06d" % i


async def _publish_all(client: BrokerClient, queue: str, n: int, rng: random.Random) -> None:
    i = 0
    while i < n:
        k = min(n - i, rng.choice([1, 1, 3, 17, 64]))
        if k == 1:
            await client.publish(queue, _payload(i))
        else:
            await client.publish_batch(queue, [_payload(j) for j in range(i, i + k)])
        i += k


async def fifo_single_consumer(seed: int, n: int = 1000) -> list[str]:
    rng = random.Random(seed)
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        pub, con = await BrokerClient.connect(host), await BrokerClient.connect(host)
        sub = await con.subscribe("q", prefetch=rng.choice([1, 7, 64, 500]))
        got = []

        async def consume():
            while len(got) < n:
                batch = await sub.get_batch(limit=rng.randint(1, 50))
                got.extend(d.payload for d in batch)
                con.ack(batch[-1].tag, multiple=True)

        task = asyncio.create_task(consume())
        await _publish_all(pub, "q", n, rng)
        await asyncio.wait_for(task, 30)
        await pub.close()
        await con.close()
    expected = [_payload(i) for i in range(n)]
    return [] if got == expected else [f"seed {seed}: order/content mismatch (got {len(got)} messages)"]


async def competing_consumers(seed: int, n: int = 1000) -> list[str]:
    rng = random.Random(seed)
    k = rng.randint(2, 4)
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        pub = await BrokerClient.connect(host)
        consumers = [await BrokerClient.connect(host) for _ in range(k)]
        subs = [await c.subscribe("q", prefetch=rng.choice([1, 5, 64])) for c in consumers]
        received: list[list[bytes]] = [[] for _ in range(k)]
        total = 0
        done = asyncio.Event()

        async def consume(i):
            nonlocal total
            while True:
                batch = await subs[i].get_batch(limit=rng.randint(1, 20))
                received[i].extend(d.payload for d in batch)
                if rng.random() < 0.3:
                    await asyncio.sleep(0)
                consumers[i].ack(batch[-1].tag, multiple=True)
                total += len(batch)
                if total >= n:
                    done.set()

        tasks = [asyncio.create_task(consume(i)) for i in range(k)]
        await _publish_all(pub, "q", n, rng)
        await asyncio.wait_for(done.wait(), 30)
        await asyncio.sleep(0.01)
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        for c in consumers + [pub]:
            await c.close()
    problems = []
    sets = [set(r) for r in received]
    if sum(len(r) for r in received) != n:
        problems.append(f"seed {seed}: {sum(len(r) for r in received)} deliveries for {n} messages")
    if set().union(*sets) != {_payload(i) for i in range(n)}:
        problems.append(f"seed {seed}: union differs from published set")
    for a in range(k):
        for b in range(a + 1, k):
            if sets[a] & sets[b]:
                problems.append(f"seed {seed}: consumers {a} and {b} overlap")
    for r in received:
        # Each consumer still sees its share in publish order.
        if r != sorted(r):
            problems.append(f"seed {seed}: per-consumer order broken")
    return problems


async def redelivery_on_disconnect(seed: int, n: int = 1000) -> list[str]:
    """A consumer dies holding unacked messages; survivors must still see everything."""
    rng = random.Random(seed)
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        pub = await BrokerClient.connect(host)
        victim = await BrokerClient.connect(host)
        vsub = await victim.subscribe("q", prefetch=rng.choice([3, 10, 100]))
        await _publish_all(pub, "q", n, rng)
        acked: list[bytes] = []
        # The victim acks a random prefix, then holds some deliveries and drops dead.
        take = rng.randint(0, n // 2)
        while len(acked) < take:
            batch = await vsub.get_batch(limit=take - len(acked))
            acked.extend(d.payload for d in batch)
            # Confirmed ack: a fire-and-forget one could die unsent with the connection.
            await victim.ack_wait(batch[-1].tag, multiple=True)
        held = await vsub.get_batch()
        victim.abort()
        await victim.wait_closed()
        survivor = await BrokerClient.connect(host)
        ssub = await survivor.subscribe("q", prefetch=rng.choice([1, 50, 1000]))
        rest: list[bytes] = []
        while len(acked) + len(rest) < n:
            batch = await asyncio.wait_for(ssub.get_batch(), 10)
            rest.extend(d.payload for d in batch)
            survivor.ack(batch[-1].tag, multiple=True)
        await asyncio.sleep(0.01)
        stats = broker.stats()["queues"]["q"]
        await survivor.close()
        await pub.close()
    problems = []
    everything = acked + rest
    if sorted(everything) != [_payload(i) for i in range(n)]:
        problems.append(f"seed {seed}: lost or duplicated messages after disconnect")
    held_payloads = [d.payload for d in held]
    if rest[: len(held_payloads)] != held_payloads:
        problems.append(f"seed {seed}: unacked messages not returned to the head in order")
    if stats["depth"] or stats["unacked"]:
        problems.append(f"seed {seed}: queue not drained: {stats}")
    return problems


async def at_least_once(seed: int, n: int = 1000) -> list[str]:
    """Consumers crash at random points; every message is eventually delivered and acked."""
    rng = random.Random(seed)
    async with Broker() as broker:
        host = f"127.0.0.1:{broker.port}"
        pub = await BrokerClient.connect(host)
        await _publish_all(pub, "q", n, rng)
        seen: set[bytes] = set()
        acked: set[bytes] = set()
        crashes = 0
        while len(acked) < n:
            con = await BrokerClient.connect(host)
            sub = await con.subscribe("q", prefetch=rng.choice([1, 10, 200]))
            budget = rng.randint(1, n)
            while budget > 0 and len(acked) < n:
                batch = await asyncio.wait_for(sub.get_batch(limit=rng.randint(1, 30)), 10)
                seen.update(d.payload for d in batch)
                budget -= len(batch)
                if budget > 0 or rng.random() < 0.5:
                    await con.ack_wait(batch[-1].tag, multiple=True)
                    acked.update(d.payload for d in batch)
            if len(acked) < n:
                con.abort()
                await con.wait_closed()
                crashes += 1
            else:
                await con.close()
        await pub.close()
        stats = broker.stats()["queues"]["q"]
    problems = []
    if seen != {_payload(i) for i in range(n)}:
        problems.append(f"seed {seed}: {n - len(seen)} messages never delivered")
    if stats["acked"] != n:
        problems.append(f"seed {seed}: broker acked {stats['acked']} of {n}")
    return problems


PROPERTIES = {
    "at-least-once": at_least_once,
    "fifo": fifo_single_consumer,
    "competing-partition": competing_consumers,
    "redelivery": redelivery_on_disconnect,
}
