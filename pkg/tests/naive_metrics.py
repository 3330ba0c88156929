"""Loop-only CMC/mAP reference used as an oracle; shares no code with the package."""


def naive_metrics(dist, q_pids, q_cams, g_pids, g_cams, ranks=(1, 5, 10)):
    n_q, n_g = len(dist), len(dist[0])
    hits = {r: 0 for r in ranks}
    ap_sum, counted = 0.0, 0
    for i in range(n_q):
        # insertion sort by (distance, index) keeps ties in gallery order
        order = []
        for j in range(n_g):
            pos = len(order)
            while pos > 0 and dist[i][order[pos - 1]] > dist[i][j]:
                pos -= 1
            order.insert(pos, j)
        ranked = [j for j in order if not (g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i])]
        flags = [g_pids[j] == q_pids[i] for j in ranked]
        if not any(flags):
            continue
        counted += 1
        first = flags.index(True)
        for r in ranks:
            if first < r:
                hits[r] += 1
        found, precision_sum = 0, 0.0
        for pos, f in enumerate(flags):
            if f:
                found += 1
                precision_sum += found / (pos + 1)
        ap_sum += precision_sum / found
    return {r: hits[r] / counted for r in ranks}, ap_sum / counted, n_q - counted
