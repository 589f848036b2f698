# Independent re-implementation of the toy trainer (seed 7, K 8, beta 0).
# usage: toy_curve.py uniform_stream_seed7.txt out.csv
# The stream holds the trainer's uniform draws, one big-endian hex f64 per line.
import struct, math, sys
U = [struct.unpack('>d', bytes.fromhex(l.strip()))[0] for l in open(sys.argv[1])]
pos = 0
def u():
    global pos; v = U[pos]; pos += 1; return v
def softmax(row):
    m = max(row); e = [math.exp(x - m) for x in row]; s = sum(e); return [x / s for x in e]
th = [[0.0]*4 for _ in range(3)]
K, lr, P = 8, 0.5, 0.5
curve = []
for it in range(300):
    eps = []
    for _ in range(K):
        s, toks = 0, []
        while True:
            p = softmax(th[s]); x = u(); acc = 0; a = 3
            for i in range(4):
                acc += p[i]
                if x < acc: a = i; break
            toks.append((s, a))
            if s == 0 and a == 1:
                s = 2 if u() < P else 1; continue
            if s == 2 and a == 2: s = 1; continue
            r = 1.0 if (s == 1 and a == 3) else 0.0
            break
        eps.append((toks, r))
    curve.append(sum(r for _, r in eps) / K)
    R = [r for t, r in eps for _ in t]
    mu = sum(R) / len(R); sd = math.sqrt(sum((x - mu) ** 2 for x in R) / len(R))
    g = [[0.0]*4 for _ in range(3)]
    if sd >= 1e-8:
        for t, r in eps:
            A = (r - mu) / sd
            for s, a in t:
                p = softmax(th[s])
                for b in range(4):
                    g[s][b] += A * ((1.0 if a == b else 0.0) - p[b]) / (K * len(t))
    for s in range(3):
        for b in range(4): th[s][b] += lr * g[s][b]
with open(sys.argv[2], 'w') as f:
    f.write('iteration,mean_reward\n')
    for i, v in enumerate(curve): f.write(f'{i},{v!r}\n')
print("draws used", pos, "tail10", sum(curve[-10:]) / 10)
