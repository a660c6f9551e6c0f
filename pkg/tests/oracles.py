"""Slow, obviously-correct reference computations used as test oracles."""

import math


def decayed_dominant_ranking(history, weights, cpus_total, mem_total, half_life, now):
    """Rank tenants straight from a job history.

    ``history`` holds (tenant, cpus, mem_mb, t_start, t_end). Each job's usage
    is charged at t_end and decays by half every ``half_life`` seconds after.
    """
    usage = {t: [0.0, 0.0] for t in weights}
    for tenant, cpus, mem, t0, t1 in history:
        f = math.pow(2.0, -(now - t1) / half_life)
        usage[tenant][0] += cpus * (t1 - t0) * f
        usage[tenant][1] += mem * (t1 - t0) * f
    score = {}
    for t, (core, mem) in usage.items():
        share = max(core / (cpus_total * half_life), mem / (mem_total * half_life))
        score[t] = share / weights[t]
    return sorted(weights, key=lambda t: (score[t], t)), score


def earliest_start(need, running, total, now, step=1):
    """Walk the clock forward until ``need`` fits; running = [(req, finish)]."""
    t = now
    horizon = max([now] + [f for _, f in running]) + step
    while t <= horizon:
        used = [0, 0, 0]
        for req, fin in running:
            if max(fin, now) > t:
                used = [used[0] + req.centicpus, used[1] + req.mem_mb, used[2] + req.disk_mb]
        if (need.centicpus <= total.centicpus - used[0] and need.mem_mb <= total.mem_mb - used[1]
                and need.disk_mb <= total.disk_mb - used[2]):
            return t
        t += step
    return None


class NatModel:
    """Reference gateway: a dict of live mappings and a sorted free list."""

    def __init__(self, lo, hi, ttl):
        self.free = list(range(lo, hi + 1))
        self.live = {}  # mapping_id -> [internal, port, expires]
        self.ttl = ttl

    def register(self, internal, now):
        for m in self.live.values():
            if m[0] == internal:
                return "duplicate"
        if not self.free:
            return "exhausted"
        port = min(self.free)
        self.free.remove(port)
        return port

    def renew(self, mid, now):
        m = self.live.get(mid)
        if m is None or now > m[2]:
            return False
        m[2] = now + self.ttl
        return True

    def sweep(self, now):
        gone = sorted(mid for mid, m in self.live.items() if m[2] < now)
        for mid in gone:
            self.free.append(self.live.pop(mid)[1])
        return gone


def random_history(rng, max_jobs=50, max_tenants=4):
    """A random completed-job history plus weights and totals for rank tests."""
    tenants = [f"t{i}" for i in range(rng.randint(1, max_tenants))]
    weights = {t: rng.choice([0.5, 1.0, 1.0, 2.0, 3.0]) for t in tenants}
    history = []
    for _ in range(rng.randint(0, max_jobs)):
        t0 = rng.randint(0, 20000)
        history.append((rng.choice(tenants), rng.randint(1, 16), rng.choice([512, 2048, 8192, 30000]),
                        t0, t0 + rng.randint(0, 5000)))
    now = max([h[4] for h in history] + [0]) + rng.randint(0, 10000)
    return history, weights, now


def backfill_delays_head(total_cpus, running, queue, chosen, start_at):
    """Replay a 1-D cpu timeline: does launching ``chosen`` push the head past start_at?

    ``running`` is [(cpus, finish)], ``queue`` is [(cpus, est)] with queue[0] the head.
    """
    busy = list(running) + [(queue[i][0], queue[i][1]) for i in chosen]
    t = 0
    while True:
        used = sum(c for c, fin in busy if fin > t)
        if queue[0][0] <= total_cpus - used:
            return t > start_at
        t += 1
