// ### KF:BEGIN reference
// KF-MOCK: compile=ok correct=1.0 time_ms=2.0 base_ms=2.0 sync_ms=0.05 first_iter_mult=10
void rotary_reference(const float* q, const float* cos_t, const float* sin_t,
                      float* out, int seq, int dim) {
    for (int s = 0; s < seq; ++s) {
        for (int d = 0; d < dim / 2; ++d) {
            float a = q[s * dim + 2 * d];
            float b = q[s * dim + 2 * d + 1];
            out[s * dim + 2 * d] = a * cos_t[s] - b * sin_t[s];
            out[s * dim + 2 * d + 1] = a * sin_t[s] + b * cos_t[s];
        }
    }
}
// ### KF:END reference
