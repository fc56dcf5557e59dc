import pytest
from datetime import date, timedelta

from models.errors import SchemaError
from models.participant import RawCsfRow, VisitRow, Demographics, Visit, BaselineBiomarkers, \
    ParticipantRecord, Diagnosis, Sex, AssayMethod
from dataio.service import (DataIntegrationService, align_csf_to_visit, select_csf_measurement,
                            build_sequences, cohort_summary, CSF_COLUMNS, VISIT_COLUMNS, DEMOGRAPHIC_COLUMNS)

BASE = date(2010, 3, 1)


def csf_row(subject_id="S1", offset_days=0, abeta42=450.0, ptau=55.0, ttau=350.0):
    collected = BASE + timedelta(days=offset_days)
    return RawCsfRow(subject_id=subject_id, abeta42=abeta42, ptau=ptau, ttau=ttau,
                     collection_year=collected.year, collection_month=collected.month,
                     collection_day=collected.day)


def visit_row(subject_id="S1", number=1, offset_days=0, diagnosis=Diagnosis.MCI, cdrsb=1.0, mmse=27):
    return VisitRow(subject_id=subject_id, visit_number=number, visit_date=BASE + timedelta(days=offset_days),
                    mmse=mmse, cdrsb=cdrsb, diagnosis=diagnosis)


def demographics(subject_id="S1", complete=True):
    return Demographics(subject_id=subject_id, sex=Sex.FEMALE, birth_year=1940,
                        education=16.0 if complete else None, center_id="C1")


def record_with_visits(n_visits):
    visits = [Visit(visit_number=index + 1, t=float(index), cdrsb=1.0, mmse=28) for index in range(max(n_visits, 2))]
    return ParticipantRecord(subject_id="S1", center_id="C1", age=70.0, sex=Sex.MALE, education=12.0,
                             baseline_date=BASE, biomarkers=BaselineBiomarkers(abeta42=500.0),
                             visits=visits[:max(n_visits, 2)], event_time=1.0, event=0)


@pytest.fixture(scope="module")
def integration_service_fixture():
    return DataIntegrationService()


@pytest.fixture
def csv_files(tmp_path):
    def write(csf_lines=(), visit_lines=(), demo_lines=(), csf_header=CSF_COLUMNS):
        paths = []
        for name, header, lines in (("csf.csv", csf_header, csf_lines), ("visits.csv", VISIT_COLUMNS, visit_lines),
                                    ("demo.csv", DEMOGRAPHIC_COLUMNS, demo_lines)):
            path = tmp_path / name
            path.write_text("\n".join([",".join(header), *lines]) + "\n")
            paths.append(str(path))
        return paths
    return write


def test_parse_dataset_empty(integration_service_fixture: DataIntegrationService, csv_files):
    # RUN
    parsed = integration_service_fixture.parse_dataset(*csv_files())

    # ASSERT
    assert parsed.csf == [] and parsed.visits == [] and parsed.demographics == {}
    assert parsed.rejects == []


def test_parse_dataset_invalid_month(integration_service_fixture: DataIntegrationService, csv_files):
    # SETUP
    paths = csv_files(csf_lines=["S1,450,55,350,1,1,1,13,5,2010"])

    # RUN
    parsed = integration_service_fixture.parse_dataset(*paths)

    # ASSERT
    assert parsed.csf == []
    assert len(parsed.rejects) == 1
    assert parsed.rejects[0].reason == "invalid date"
    assert parsed.rejects[0].subject_id == "S1"


def test_parse_dataset_fixture_rows(integration_service_fixture: DataIntegrationService, csv_files):
    # SETUP
    paths = csv_files(csf_lines=["S1,450.5,55,350,1,2,1,3,1,2010",
                                 "S2,,70.25,410,2,2,8,6,,2011",
                                 "S3,-4,-4,-4,1,1,1,7,4,2012"],
                      visit_lines=["S1,1,3,2,2010,28,0.5,3",
                                   "S1,2,3,10,2011,88,2.0,4"],
                      demo_lines=["S1,2,1940,16,7"])

    # RUN
    parsed = integration_service_fixture.parse_dataset(*paths)

    # ASSERT
    assert parsed.csf[0] == RawCsfRow(subject_id="S1", abeta42=450.5, ptau=55.0, ttau=350.0,
                                      abeta42_method=AssayMethod.ELISA, ptau_method=AssayMethod.LUMINEX,
                                      ttau_method=AssayMethod.ELISA,
                                      collection_year=2010, collection_month=3, collection_day=1)
    assert parsed.csf[1].abeta42 is None
    assert parsed.csf[1].collection_date == date(2011, 6, 15)
    assert parsed.csf[1].ttau_method == AssayMethod.OTHER
    assert not parsed.csf[2].has_biomarker()
    assert parsed.visits[0] == VisitRow(subject_id="S1", visit_number=1, visit_date=date(2010, 3, 2),
                                        mmse=28, cdrsb=0.5, diagnosis=Diagnosis.MCI)
    assert parsed.visits[1].mmse is None
    assert parsed.visits[1].diagnosis == Diagnosis.DEMENTIA
    assert parsed.demographics["S1"] == Demographics(subject_id="S1", sex=Sex.FEMALE, birth_year=1940,
                                                     education=16.0, center_id="7")


def test_parse_dataset_unknown_assay_method(integration_service_fixture: DataIntegrationService, csv_files):
    # SETUP
    paths = csv_files(csf_lines=["S1,450,55,350,foo,1,1,3,1,2010",
                                 "S2,450,55,350,Luminex,,2,3,1,2010"])

    # RUN
    parsed = integration_service_fixture.parse_dataset(*paths)

    # ASSERT
    assert [row.subject_id for row in parsed.csf] == ["S2"]
    assert parsed.csf[0].abeta42_method == AssayMethod.LUMINEX
    assert parsed.csf[0].ptau_method == AssayMethod.ELISA
    assert len(parsed.rejects) == 1
    assert parsed.rejects[0].subject_id == "S1" and parsed.rejects[0].row == 1
    assert parsed.rejects[0].reason.startswith("unknown assay method")


def test_parse_dataset_repeated_visit_number(integration_service_fixture: DataIntegrationService, csv_files):
    # SETUP
    paths = csv_files(visit_lines=["S1,1,3,2,2010,28,0.5,3",
                                   "S1,2,3,10,2011,27,1.0,3",
                                   "S1,2,4,1,2012,26,1.5,3",
                                   "S1,1,5,1,2013,25,2.0,4",
                                   "S2,1,3,2,2010,29,0.0,1"])

    # RUN
    parsed = integration_service_fixture.parse_dataset(*paths)

    # ASSERT
    assert [(visit.subject_id, visit.visit_number) for visit in parsed.visits] == [("S1", 1), ("S1", 2), ("S2", 1)]
    assert parsed.visits[1].visit_date == date(2011, 3, 10)
    assert sorted(reject.row for reject in parsed.rejects) == [3, 4]
    assert all(reject.reason.startswith("visit number not increasing") for reject in parsed.rejects)


def test_integrate_drops_out_of_order_visit_numbers(integration_service_fixture: DataIntegrationService):
    # SETUP
    visits = [visit_row(number=1), visit_row(number=3, offset_days=365), visit_row(number=2, offset_days=730),
              visit_row(number=4, offset_days=1095)]

    # RUN
    record = integration_service_fixture.integrate_subject("S1", [csf_row()], visits, demographics())

    # ASSERT
    assert [visit.visit_number for visit in record.visits] == [1, 3, 4]


def test_parse_dataset_missing_column(integration_service_fixture: DataIntegrationService, csv_files):
    paths = csv_files(csf_header=[column for column in CSF_COLUMNS if column != "CSFPTAU"])
    with pytest.raises(SchemaError, match="CSFPTAU"):
        integration_service_fixture.parse_dataset(*paths)


def test_align_strict_minimum():
    visits = [visit_row(number=1, offset_days=-151), visit_row(number=2, offset_days=78)]
    assert align_csf_to_visit(csf_row(), visits).visit_number == 2


def test_align_boundary():
    assert align_csf_to_visit(csf_row(), [visit_row(offset_days=91)]) is None
    assert align_csf_to_visit(csf_row(), [visit_row(offset_days=90)]) is not None
    assert align_csf_to_visit(csf_row(), []) is None


def test_align_tie_prefers_earlier_visit():
    visits = [visit_row(number=2, offset_days=20), visit_row(number=1, offset_days=-20)]
    assert align_csf_to_visit(csf_row(), visits).visit_number == 1


def test_select_csf_measurement():
    single = csf_row(offset_days=5)
    assert select_csf_measurement([single], BASE) == single
    assert select_csf_measurement([csf_row(offset_days=-30), csf_row(offset_days=10)], BASE).collection_date \
        == BASE + timedelta(days=10)
    assert select_csf_measurement([csf_row(offset_days=20), csf_row(offset_days=-20)], BASE).collection_date \
        == BASE - timedelta(days=20)


@pytest.mark.parametrize("n_visits,expected", [(7, 3), (5, 1), (4, 0)])
def test_build_sequences_counts(n_visits, expected):
    windows = build_sequences(record_with_visits(n_visits))
    assert len(windows) == expected
    assert all(len(window.states) == 5 for window in windows)


def test_build_sequences_window_identity():
    for n_visits in range(2, 21):
        assert len(build_sequences(record_with_visits(n_visits))) == max(0, n_visits - 5 + 1)


def test_integrate_exclusion_reasons(integration_service_fixture: DataIntegrationService):
    # SETUP
    csf = [csf_row("A"), csf_row("B"), csf_row("C", offset_days=-120), csf_row("D"),
           csf_row("E", abeta42=None, ptau=None, ttau=None)]
    visits = [visit_row("A", 1, 0), visit_row("B", 1, 0), visit_row("B", 2, 365),
              visit_row("C", 1, 0), visit_row("C", 2, 400), visit_row("D", 1, 0), visit_row("D", 2, 365),
              visit_row("E", 1, 0), visit_row("E", 2, 365)]
    demo = {subject: demographics(subject) for subject in "ABCE"}
    demo["D"] = demographics("D", complete=False)
    demo["F"] = demographics("F")

    # RUN
    result = integration_service_fixture.integrate(csf, visits, demo)

    # ASSERT
    reasons = {item.subject_id: item.reason for item in result.exclusions}
    assert reasons == {"A": "insufficient visits", "C": "alignment", "D": "incomplete demographics",
                       "E": "no valid biomarker", "F": "no valid biomarker"}
    assert [record.subject_id for record in result.records] == ["B"]


def test_integrate_event_derivation(integration_service_fixture: DataIntegrationService):
    # SETUP
    csf = [csf_row(subject) for subject in ("P", "Q", "R")] + [csf_row("P", offset_days=400)]
    visits = [visit_row("P", 1, 0, Diagnosis.MCI, mmse=28), visit_row("P", 2, 365, Diagnosis.MCI, mmse=26),
              visit_row("P", 3, 731, Diagnosis.DEMENTIA, mmse=22), visit_row("P", 4, 1096, Diagnosis.DEMENTIA),
              visit_row("Q", 1, 0, Diagnosis.NORMAL), visit_row("Q", 2, 365, Diagnosis.MCI),
              visit_row("R", 2, 730, Diagnosis.MCI), visit_row("R", 1, 0, Diagnosis.MCI)]
    demo = {subject: demographics(subject) for subject in "PQR"}

    # RUN
    records = {record.subject_id: record for record in integration_service_fixture.integrate(csf, visits, demo).records}

    # ASSERT
    p = records["P"]
    assert p.event == 1 and p.event_time == pytest.approx(731 / 365.25)
    assert [visit.t for visit in p.visits] == pytest.approx([0.0, 365 / 365.25, 731 / 365.25, 1096 / 365.25])
    assert [visit.mmse_change for visit in p.visits] == [0, -2, -6, -1]
    assert [visit.progressed for visit in p.visits] == [False, False, True, True]
    assert p.biomarkers.collection_gap_days == 0
    assert p.age == pytest.approx((BASE - date(1940, 7, 1)).days / 365.25)
    q = records["Q"]
    assert q.event == 0 and q.event_time == pytest.approx(365 / 365.25)
    assert q.visits[1].progressed
    r = records["R"]
    assert [visit.visit_number for visit in r.visits] == [1, 2]
    assert r.event == 0 and r.event_time == pytest.approx(730 / 365.25)


def test_integrate_conservation(integration_service_fixture: DataIntegrationService, generated_dataset_fixture):
    # SETUP
    parsed = generated_dataset_fixture

    # RUN
    result = integration_service_fixture.integrate(parsed.csf, parsed.visits, parsed.demographics)

    # ASSERT
    subjects = {row.subject_id for row in parsed.csf} | {row.subject_id for row in parsed.visits} \
        | set(parsed.demographics)
    emitted = [record.subject_id for record in result.records] + [item.subject_id for item in result.exclusions]
    assert len(emitted) == len(set(emitted))
    assert set(emitted) == subjects
    for record in result.records:
        times = [visit.t for visit in record.visits]
        assert times[0] == 0.0 and all(b > a for a, b in zip(times, times[1:]))


def test_cohort_summary(integration_service_fixture: DataIntegrationService):
    # SETUP
    csf = [csf_row(subject) for subject in ("P", "Q")]
    visits = [visit_row("P", 1, 0), visit_row("P", 2, 365, Diagnosis.DEMENTIA),
              visit_row("Q", 1, 0), visit_row("Q", 2, 365), visit_row("Q", 3, 730)]
    records = integration_service_fixture.integrate(csf, visits, {s: demographics(s) for s in "PQ"}).records

    # RUN
    table = cohort_summary(records)

    # ASSERT
    values = {row["statistic"]: row["value"] for row in table.rows}
    assert values["participants"] == 2
    assert values["event_rate"] == pytest.approx(0.5)
    assert values["visits_per_subject_mean"] == pytest.approx(2.5)
    assert values["female_pct"] == pytest.approx(100.0)
    assert values["sequences"] == 0
