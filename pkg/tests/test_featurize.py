from datetime import date, datetime, timedelta

import numpy as np
import pytest

from crashformer.errors import ValidationError
from crashformer.featurize import (DEFAULT_WEATHER_RADIUS_KM, N_FEATURES,
                                   SLOT_ACC_SEVERITY, SLOT_DOW, SLOT_DOM, SLOT_HOLIDAY,
                                   SLOT_MONTH, SLOT_OCCURRED, SLOT_POI, SLOT_PRECIPITATION,
                                   SLOT_WEATHER_KIND, SLOT_WEATHER_SEVERITY, TimeWindow,
                                   build_feature, build_feature_table, time_features,
                                   us_federal_holidays, window_count, window_index)
from crashformer.geoindex import haversine_km, locate_region, region_center
from crashformer.ingest import AccidentRecord, POI_NAMES, WeatherRecord

EPOCH = datetime(2021, 3, 1)

# Hand-enumerated US federal holidays, 2016-2021 (no observed-day shifts).
HOLIDAYS_BY_YEAR = {
    2016: ["01-01", "01-18", "02-15", "05-30", "07-04", "09-05", "10-10", "11-11", "11-24", "12-25"],
    2017: ["01-01", "01-16", "02-20", "05-29", "07-04", "09-04", "10-09", "11-11", "11-23", "12-25"],
    2018: ["01-01", "01-15", "02-19", "05-28", "07-04", "09-03", "10-08", "11-11", "11-22", "12-25"],
    2019: ["01-01", "01-21", "02-18", "05-27", "07-04", "09-02", "10-14", "11-11", "11-28", "12-25"],
    2020: ["01-01", "01-20", "02-17", "05-25", "07-04", "09-07", "10-12", "11-11", "11-26", "12-25"],
    2021: ["01-01", "01-18", "02-15", "05-31", "06-19", "07-04", "09-06", "10-11", "11-11", "11-25", "12-25"],
}


def accident(ts, lat, lon, severity=2.0, poi=()):
    flags = tuple(1 if name in poi else 0 for name in POI_NAMES)
    return AccidentRecord(ts, lat, lon, severity, flags)


def weather(start, end, kind="rain", severity=2.0, precip=0.0, lat=29.80, lon=-95.40):
    return WeatherRecord(lat, lon, start, end, kind, severity, precip)


def test_window_index_basics():
    assert window_index(EPOCH, EPOCH).index == 0
    assert window_index(datetime(2016, 6, 21, 7, 30), datetime(2016, 6, 21)).index == 1
    assert window_index(EPOCH + timedelta(hours=23, minutes=59), EPOCH).index == 3
    assert window_index(EPOCH + timedelta(days=2), EPOCH).index == 8


def test_window_index_errors():
    with pytest.raises(ValidationError):
        window_index(EPOCH - timedelta(seconds=1), EPOCH)
    with pytest.raises(ValidationError):
        window_index(EPOCH, datetime(2021, 3, 1, 6))  # epoch not midnight


def test_study_period_window_count():
    assert window_count(datetime(2016, 6, 21), date(2021, 12, 31)) == 8080
    assert window_count(datetime(2021, 1, 1), date(2021, 1, 1)) == 4


def test_time_features_examples():
    w = window_index(datetime(2021, 7, 4, 13), datetime(2021, 7, 1))
    assert time_features(w)[3] == 1
    w = window_index(datetime(2021, 1, 18, 1), datetime(2021, 1, 1))
    assert time_features(w)[3] == 1
    w = window_index(datetime(2021, 3, 3, 0), EPOCH)
    dow, dom, month, holiday = time_features(w)
    assert (dow, dom, month, holiday) == (2, 3, 3, 0)


def test_holiday_rules_match_hand_enumeration():
    for year, days in HOLIDAYS_BY_YEAR.items():
        expected = {date.fromisoformat(f"{year}-{md}") for md in days}
        assert us_federal_holidays(year) == expected


def region_at(lat, lon):
    return locate_region(lat, lon)


def test_build_feature_empty_cell_has_only_time_features():
    region = region_at(29.76, -95.37)
    w = TimeWindow(index=5, epoch=EPOCH)
    vec = build_feature(region, w, [], [])
    nonzero = set(np.flatnonzero(vec).tolist())
    assert nonzero <= {SLOT_DOW, SLOT_DOM, SLOT_MONTH, SLOT_HOLIDAY}
    assert vec[SLOT_DOM] == pytest.approx(2 / 31)   # 2021-03-02
    assert vec[SLOT_MONTH] == pytest.approx(3 / 12)


def test_build_feature_accident_aggregation_oracle():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    w = TimeWindow(index=0, epoch=EPOCH)
    acc = [
        accident(EPOCH + timedelta(hours=1), lat, lon, severity=2.0, poi=("crossing",)),
        accident(EPOCH + timedelta(hours=2), lat, lon, severity=4.0),
    ]
    vec = build_feature(region, w, acc, [])
    assert vec[SLOT_ACC_SEVERITY] == 3.0
    assert vec[SLOT_POI["crossing"]] == 1.0
    assert vec[SLOT_OCCURRED] == 1.0
    assert vec[SLOT_POI["bump"]] == 0.0


def test_build_feature_weather_aggregation_oracle():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    w = TimeWindow(index=0, epoch=EPOCH)
    rain = weather(EPOCH - timedelta(hours=2), EPOCH + timedelta(hours=1),
                   kind="rain", severity=2.0, precip=1.5, lat=lat + 0.05, lon=lon)
    vec = build_feature(region, w, [], [rain])
    expected = np.zeros(N_FEATURES)
    expected[SLOT_WEATHER_SEVERITY] = 2.0
    expected[SLOT_PRECIPITATION] = 1.5
    expected[SLOT_WEATHER_KIND["rain"]] = 1.0
    expected[SLOT_DOW] = vec[SLOT_DOW]
    expected[SLOT_DOM] = vec[SLOT_DOM]
    expected[SLOT_MONTH] = vec[SLOT_MONTH]
    expected[SLOT_HOLIDAY] = vec[SLOT_HOLIDAY]
    np.testing.assert_array_equal(vec, expected)


def test_build_feature_weather_filters():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    w = TimeWindow(index=0, epoch=EPOCH)
    far = weather(EPOCH, EPOCH + timedelta(hours=2), lat=lat + 5.0, lon=lon)
    later = weather(EPOCH + timedelta(hours=7), EPOCH + timedelta(hours=9), lat=lat, lon=lon)
    vec = build_feature(region, w, [], [far, later])
    assert vec[SLOT_WEATHER_KIND["rain"]] == 0.0
    assert vec[SLOT_WEATHER_SEVERITY] == 0.0
    # boundary: event ending exactly at the window start still counts
    touching = weather(EPOCH - timedelta(hours=3), EPOCH, lat=lat, lon=lon)
    vec = build_feature(region, w, [], [touching])
    assert vec[SLOT_WEATHER_KIND["rain"]] == 1.0


def test_build_feature_permutation_invariance():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    w = TimeWindow(index=0, epoch=EPOCH)
    rng = np.random.default_rng(2)
    acc = [accident(EPOCH + timedelta(hours=float(rng.uniform(0, 6))), lat, lon,
                    severity=float(rng.integers(1, 5)),
                    poi=(POI_NAMES[int(rng.integers(0, 13))],))
           for _ in range(9)]
    base = build_feature(region, w, acc, [])
    for _ in range(5):
        perm = [acc[i] for i in rng.permutation(len(acc))]
        np.testing.assert_array_equal(build_feature(region, w, perm, []), base)


def test_table_single_accident_single_row():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    acc = [accident(EPOCH + timedelta(hours=6 * 3 + 1), lat, lon)]
    table = build_feature_table(acc, [], EPOCH, 8)
    assert len(table.regions) == 1
    assert table.labels.sum() == 1
    assert table.labels[0, 3] == 1
    np.testing.assert_array_equal(table.labels[0], table.features[0, :, SLOT_OCCURRED])


def test_table_positive_rate_recount():
    rng = np.random.default_rng(8)
    centers = [(29.76, -95.37), (29.86, -95.47), (29.66, -95.27)]
    acc = []
    for _ in range(60):
        lat, lon = centers[int(rng.integers(0, 3))]
        ts = EPOCH + timedelta(hours=float(rng.uniform(0, 6 * 40)))
        acc.append(accident(ts, lat, lon, severity=float(rng.integers(1, 5))))
    table = build_feature_table(acc, [], EPOCH, 40)
    distinct = {(locate_region(a.lat, a.lon).cell,
                 int((a.timestamp - EPOCH).total_seconds() // 21600)) for a in acc}
    rate = table.labels.mean()
    assert rate == pytest.approx(len(distinct) / (len(table.regions) * 40))


def test_table_monotone_in_added_accident():
    region = region_at(29.76, -95.37)
    lat, lon = region_center(region)
    acc = [accident(EPOCH + timedelta(hours=1), lat, lon)]
    t1 = build_feature_table(acc, [], EPOCH, 8)
    acc2 = acc + [accident(EPOCH + timedelta(hours=2), lat, lon)]
    t2 = build_feature_table(acc2, [], EPOCH, 8)
    assert np.all(t2.labels >= t1.labels)


def test_table_rejects_empty_world():
    with pytest.raises(ValidationError):
        build_feature_table([], [], EPOCH, 8)
    late = [accident(EPOCH + timedelta(days=400), 29.76, -95.37)]
    with pytest.raises(ValidationError):
        build_feature_table(late, [], EPOCH, 8)


# --- independent naive reference ------------------------------------------

def naive_reference_table(accidents, weather_events, epoch, n_windows,
                          radius_km=DEFAULT_WEATHER_RADIUS_KM):
    """Triple-loop recomputation with its own window arithmetic and holiday
    table; shares only the hex index with the implementation."""
    horizon = n_windows * 6 * 3600
    in_horizon = [a for a in accidents
                  if 0 <= (a.timestamp - epoch).total_seconds() < horizon]
    cells = sorted({locate_region(a.lat, a.lon).cell for a in in_horizon})
    features = np.zeros((len(cells), n_windows, N_FEATURES))
    labels = np.zeros((len(cells), n_windows), dtype=np.uint8)
    for ci, cell in enumerate(cells):
        region = [locate_region(a.lat, a.lon) for a in in_horizon
                  if locate_region(a.lat, a.lon).cell == cell][0]
        c_lat, c_lon = region_center(region)
        for w in range(n_windows):
            w_start = epoch + timedelta(hours=6 * w)
            w_end = w_start + timedelta(hours=6)
            vec = features[ci, w]
            sev_sum, count = 0.0, 0
            for a in in_horizon:
                if locate_region(a.lat, a.lon).cell != cell:
                    continue
                if int((a.timestamp - epoch).total_seconds() // 21600) != w:
                    continue
                sev_sum += a.severity
                count += 1
                for k, flag in enumerate(a.poi_flags):
                    if flag:
                        vec[8 + k] = 1.0
            if count:
                vec[25] = sev_sum / count
                vec[26] = 1.0
                labels[ci, w] = 1
            wsev, wprec, wcount = 0.0, 0.0, 0
            for ev in weather_events:
                if haversine_km(c_lat, c_lon, ev.station_lat, ev.station_lon) > radius_km:
                    continue
                if not (ev.start < w_end and ev.end >= w_start):
                    continue
                wsev += ev.severity
                wprec += ev.precipitation
                wcount += 1
                kind_slot = {"rain": 2, "fog": 3, "cold": 4, "snow": 5, "storm": 6, "hail": 7}
                if ev.kind in kind_slot:
                    vec[kind_slot[ev.kind]] = 1.0
            if wcount:
                vec[0] = wsev / wcount
                vec[1] = wprec / wcount
            d = w_start.date()
            vec[21] = d.weekday() / 6.0
            vec[22] = d.day / 31.0
            vec[23] = d.month / 12.0
            md = f"{d.month:02d}-{d.day:02d}"
            vec[24] = 1.0 if md in HOLIDAYS_BY_YEAR.get(d.year, []) else 0.0
    return features, labels


def random_micro_world(rng):
    n_regions = int(rng.integers(1, 6))
    n_windows = int(rng.integers(8, 41))
    centers = [(29.5 + 0.1 * i, -95.5 + 0.07 * i) for i in range(n_regions)]
    accidents = []
    for _ in range(int(rng.integers(1, 51))):
        lat, lon = centers[int(rng.integers(0, n_regions))]
        ts = EPOCH + timedelta(seconds=float(rng.uniform(0, n_windows * 21600 - 1)))
        poi = tuple(POI_NAMES[k] for k in np.flatnonzero(rng.random(13) < 0.15))
        accidents.append(accident(ts, lat + float(rng.uniform(-0.004, 0.004)),
                                  lon + float(rng.uniform(-0.004, 0.004)),
                                  severity=float(rng.integers(1, 5)), poi=poi))
    events = []
    for _ in range(int(rng.integers(0, 10))):
        s = EPOCH + timedelta(seconds=float(rng.uniform(-21600, n_windows * 21600)))
        e = s + timedelta(seconds=float(rng.uniform(0, 3 * 21600)))
        kind = ["rain", "fog", "cold", "snow", "storm", "hail", "other"][int(rng.integers(0, 7))]
        events.append(weather(s, e, kind=kind, severity=float(rng.integers(1, 5)),
                              precip=float(rng.integers(0, 8)) / 2,
                              lat=29.5 + float(rng.uniform(0, 0.5)),
                              lon=-95.5 + float(rng.uniform(0, 0.5))))
    return accidents, events, n_windows


def test_table_matches_naive_reference_micro_worlds():
    rng = np.random.default_rng(31)
    for _ in range(20):
        accidents, events, n_windows = random_micro_world(rng)
        try:
            table = build_feature_table(accidents, events, EPOCH, n_windows)
        except ValidationError:
            continue  # all accidents landed outside the horizon
        ref_feats, ref_labels = naive_reference_table(accidents, events, EPOCH, n_windows)
        np.testing.assert_array_equal(table.features, ref_feats)
        np.testing.assert_array_equal(table.labels, ref_labels)
