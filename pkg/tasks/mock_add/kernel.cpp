// ### KF:BEGIN reference
// KF-MOCK: compile=ok correct=1.0 time_ms=1.2 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void reference_add(const float* a, const float* b, float* out, int n) {
    for (int i = 0; i < n; ++i) {
        out[i] = a[i] + b[i];
    }
}
// ### KF:END reference
// ### KF:BEGIN instructions
// Optimize the elementwise add for a discrete GPU; inputs are contiguous
// float buffers of one million elements.
// ### KF:END instructions
