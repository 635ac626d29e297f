"""Watch the resource monitor track a fluctuating device.

Generates a short trace for one edge device whose GPU memory takes a
step change and whose bus bandwidth does a random walk, then feeds the
samples through the EWMA smoother and prints both views. Ends with
heterogeneity scores for a small cluster.
"""

from comoe.resource import (DeviceProfile, ResourceSample, ResourceTraceSpec,
                            SmoothedResource, ewma_update, generate_trace,
                            heterogeneity)


def base_sample():
    return ResourceSample(time=0, gpu_compute=2e10, cpu_compute=8e10,
                          gpu_util=0.2, cpu_util=0.3, gpu_mem_total=8e9,
                          cpu_mem_total=3.2e10, gpu_mem_used=1e9,
                          cpu_mem_used=8e9, bw_gpu_cpu=1.6e10, bw_net=1e9,
                          lat_gpu_cpu=1e-4, lat_net=5e-3)


def main():
    spec = ResourceTraceSpec(base=base_sample(), seed=7, length=24,
                             fluctuations={
        "gpu_mem_used": {"model": "step-change", "time": 10, "value": 4e9},
        "bw_gpu_cpu": {"model": "random-walk", "step_stddev": 1.5e9,
                       "min": 4e9, "max": 3.2e10},
    })
    trace = generate_trace(spec)

    first = trace[0]
    mem = SmoothedResource.start(first.gpu_mem_available, alpha=0.3,
                                 window_size=8)
    bw = SmoothedResource.start(first.bw_gpu_cpu, alpha=0.3, window_size=8)
    print("tick  mem_avail_raw  mem_avail_ewma  stability     bw_raw    bw_ewma")
    for sample in trace:
        if sample.time > 0:
            mem = ewma_update(mem, sample.gpu_mem_available)
            bw = ewma_update(bw, sample.bw_gpu_cpu)
        print(f"{sample.time:4d}  {sample.gpu_mem_available:13.3e} "
              f"{mem.value:15.3e}  {mem.stability:9.3f}  "
              f"{sample.bw_gpu_cpu:9.3e}  {bw.value:9.3e}")

    print()
    print("the step at t=10 drags the smoothed value down over a few ticks;")
    print("stability dips while the window straddles the change, then recovers.")

    weights = {"gpu_compute": 0.4, "gpu_mem_available": 0.4, "bw_gpu_cpu": 0.2}
    cluster = [
        DeviceProfile("edge0", {"gpu_compute": 2e10,
                                "gpu_mem_available": 7e9,
                                "bw_gpu_cpu": 1.6e10}, weights),
        DeviceProfile("edge1", {"gpu_compute": 1e10,
                                "gpu_mem_available": 4e9,
                                "bw_gpu_cpu": 8e9}, weights),
        DeviceProfile("edge2", {"gpu_compute": 3e10,
                                "gpu_mem_available": 1e10,
                                "bw_gpu_cpu": 2.4e10}, weights),
    ]
    report = heterogeneity(cluster)
    print()
    print("cluster heterogeneity (mean weighted distance to the others):")
    for device_id, score in report.scores.items():
        print(f"  {device_id}: {score:.3f}")


if __name__ == "__main__":
    main()
