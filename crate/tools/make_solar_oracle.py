#!/usr/bin/env python3
"""Regenerate the solar-position oracle fixture used by the ephemeris tests.

The oracle implements the Astronomical Almanac low-precision solar formula
(Michalsky 1988), which is accurate to ~0.01 deg between 1950 and 2050 and
shares no code or series coefficients with the library implementation.

Writes crates/core/tests/data/solar_oracle_grid.csv and prints the scalar
constants that are frozen into the test sources.
"""

import csv
import math
import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)


def julian_day(dt: datetime) -> float:
    delta = dt - J2000
    return 2451545.0 + delta.total_seconds() / 86400.0


def almanac_sun(dt: datetime, lat_deg: float, lon_deg: float):
    """Return (altitude_deg, declination_deg, eot_minutes) per Michalsky."""
    n = julian_day(dt) - 2451545.0
    mean_lon = (280.460 + 0.9856474 * n) % 360.0
    mean_anom = math.radians((357.528 + 0.9856003 * n) % 360.0)
    ecl_lon = math.radians(
        mean_lon + 1.915 * math.sin(mean_anom) + 0.020 * math.sin(2.0 * mean_anom)
    )
    obliquity = math.radians(23.439 - 0.0000004 * n)

    ra = math.degrees(
        math.atan2(math.cos(obliquity) * math.sin(ecl_lon), math.cos(ecl_lon))
    ) % 360.0
    decl = math.asin(math.sin(obliquity) * math.sin(ecl_lon))

    ut_hours = dt.hour + dt.minute / 60.0 + dt.second / 3600.0
    gmst = (6.697375 + 0.0657098242 * n + ut_hours) % 24.0
    lmst = (gmst + lon_deg / 15.0) % 24.0
    hour_angle = math.radians(((lmst * 15.0 - ra + 180.0) % 360.0) - 180.0)

    lat = math.radians(lat_deg)
    alt = math.asin(
        math.sin(lat) * math.sin(decl)
        + math.cos(lat) * math.cos(decl) * math.cos(hour_angle)
    )
    eot_minutes = 4.0 * (((mean_lon - ra + 180.0) % 360.0) - 180.0)
    return math.degrees(alt), math.degrees(decl), eot_minutes


def main():
    rng = random.Random(20250614)
    out = Path(__file__).resolve().parent.parent / "crates/core/tests/data"
    out.mkdir(parents=True, exist_ok=True)

    start = datetime(2015, 1, 1, tzinfo=timezone.utc)
    span = datetime(2026, 1, 1, tzinfo=timezone.utc) - start

    rows = []
    for _ in range(100):
        lat = rng.uniform(-60.0, 60.0)
        lon = rng.uniform(-180.0, 180.0)
        dt = start + timedelta(seconds=rng.randrange(int(span.total_seconds())))
        alt, _, _ = almanac_sun(dt, lat, lon)
        rows.append(
            (
                f"{lat:.6f}",
                f"{lon:.6f}",
                dt.strftime("%Y-%m-%dT%H:%M:%SZ"),
                f"{alt:.6f}",
            )
        )

    with open(out / "solar_oracle_grid.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lat_deg", "lon_deg", "utc", "altitude_deg"])
        w.writerows(rows)

    jd_check = datetime(2024, 6, 21, 0, 0, 0, tzinfo=timezone.utc)
    print(f"julian_day(2024-06-21T00:00:00Z) = {julian_day(jd_check):.6f}")

    eot_dt = datetime(2023, 11, 3, 12, 0, 0, tzinfo=timezone.utc)
    _, decl, eot = almanac_sun(eot_dt, 0.0, 0.0)
    print(f"equation_of_time(2023-11-03T12:00:00Z) = {eot:.4f} minutes")
    print(f"declination(2023-11-03T12:00:00Z) = {decl:.4f} deg")

    # June 2024 solstice (~2024-06-20T20:51Z): declination should sit at the
    # obliquity of the ecliptic.
    sol_dt = datetime(2024, 6, 20, 20, 51, 0, tzinfo=timezone.utc)
    _, decl_sol, _ = almanac_sun(sol_dt, 0.0, 0.0)
    print(f"declination(2024-06-20T20:51:00Z) = {decl_sol:.4f} deg")

    # DDPM linear schedule cross-check: alpha_bar[T-1] for T=1000,
    # beta in [1e-4, 0.02].
    t_count = 1000
    prod = 1.0
    for i in range(t_count):
        beta = 1e-4 + (0.02 - 1e-4) * i / (t_count - 1)
        prod *= 1.0 - beta
    print(f"alpha_bar[999] (T=1000, linear 1e-4..0.02) = {prod:.6e}")


if __name__ == "__main__":
    main()
