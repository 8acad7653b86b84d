// ### KF:BEGIN instructions
// Apply rotary position embedding to the query tensor. The pair layout is
// interleaved; keep it. Sequence length 4096, head dim 128.
// ### KF:END instructions
// ### KF:BEGIN initial_kernel
// KF-MOCK: compile=ok correct=1.0 time_ms=1.8 base_ms=2.0 sync_ms=0.05 first_iter_mult=10
void rotary_naive(const float* q, const float* cos_t, const float* sin_t,
                  float* out, int seq, int dim) {
    for_each_workitem(i, seq * dim / 2) {
        int s = i / (dim / 2);
        int d = i % (dim / 2);
        float a = q[s * dim + 2 * d];
        float b = q[s * dim + 2 * d + 1];
        out[s * dim + 2 * d] = a * cos_t[s] - b * sin_t[s];
        out[s * dim + 2 * d + 1] = a * sin_t[s] + b * cos_t[s];
    }
}
// ### KF:END initial_kernel
