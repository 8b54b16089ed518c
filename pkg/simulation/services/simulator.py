"""
Iteration-level replay of a popularity trace under one replication policy.

Each iteration: choose the placement from the previous iteration's
observation, route the batch over it (drops), then charge the modeled
latency: the expert-path communication of the policy's design, migration
on interval rebalances, an optional metadata term and a constant compute
term.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Dict, List, Optional, Sequence, Tuple

from django.conf import settings

from cluster.exceptions import InvariantViolation, ShapeMismatch
from cluster.types import ClusterSpec, ExpertPlacement, Trace, validate_cluster
from comms.services.comm_plan import build_comm_plan, plan_byte_totals
from comms.services.cost_model import comm_time_dynamic, comm_time_static
from placement.services.policies import PolicyConfig, PolicyKind, migration_time, next_placement, validate_policy
from placement.services.router import route

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['iter', 'churn', 'dropped', 'survival', 'comm_grad_s', 'comm_weight_s', 'migration_s', 'total_s']


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    policy: str
    churn: int
    rebalanced: bool
    dropped_per_class: Tuple[int, ...]
    dropped: int
    routed: int
    survival: float
    comm_grad_s: float
    comm_weight_s: float
    migration_s: float
    metadata_s: float
    compute_s: float
    total_s: float
    replica_counts: Tuple[int, ...] = ()

    def to_dict(self):
        return {
            'iteration': self.iteration,
            'policy': self.policy,
            'churn': self.churn,
            'rebalanced': self.rebalanced,
            'dropped_per_class': list(self.dropped_per_class),
            'dropped': self.dropped,
            'routed': self.routed,
            'survival': self.survival,
            'comm_grad_s': self.comm_grad_s,
            'comm_weight_s': self.comm_weight_s,
            'migration_s': self.migration_s,
            'metadata_s': self.metadata_s,
            'compute_s': self.compute_s,
            'total_s': self.total_s,
            'replica_counts': list(self.replica_counts),
        }

    @classmethod
    def from_dict(cls, data) -> 'IterationRecord':
        values = dict(data)
        values['dropped_per_class'] = tuple(values['dropped_per_class'])
        values['replica_counts'] = tuple(values.get('replica_counts', ()))
        return cls(**values)


def compute_aggregates(records: Sequence[IterationRecord]) -> Dict:
    """Run-level figures, derived from the records alone"""
    totals = [r.total_s for r in records]
    dropped = sum(r.dropped for r in records)
    routed = sum(r.routed for r in records)
    rebalance_totals = [r.total_s for r in records if r.rebalanced]
    low, high = (min(totals), max(totals)) if totals else (0.0, 0.0)
    if high == low:
        ratio = 1.0
    elif low > 0:
        ratio = high / low
    else:
        ratio = None
    return {
        'iterations': len(records),
        'total_dropped': dropped,
        'total_routed': routed,
        'survival_pct': 100.0 if routed == 0 else 100.0 * (1 - dropped / routed),
        'mean_latency_s': fmean(totals) if totals else 0.0,
        'mean_rebalance_latency_s': fmean(rebalance_totals) if rebalance_totals else None,
        'time_to_process_s': math.fsum(totals),
        'mean_churn': fmean(r.churn for r in records) if records else 0.0,
        'rebalance_count': len(rebalance_totals),
        'max_latency_ratio': ratio,
    }


@dataclass(frozen=True)
class SimReport:
    spec: ClusterSpec
    policy: PolicyConfig
    records: Tuple[IterationRecord, ...]
    aggregates: Dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.policy.label

    def to_dict(self):
        return {
            'cluster': self.spec.to_dict(),
            'policy': self.policy.to_dict(),
            'label': self.label,
            'aggregates': self.aggregates,
            'records': [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data) -> 'SimReport':
        policy = data['policy']
        return cls(
            spec=ClusterSpec(**data['cluster']),
            policy=PolicyConfig(
                kind=PolicyKind(policy['kind']),
                interval=policy.get('interval'),
                inter_rank_only=policy.get('inter_rank_only', False),
            ),
            records=tuple(IterationRecord.from_dict(r) for r in data['records']),
            aggregates=dict(data['aggregates']),
        )


@dataclass(frozen=True)
class SimulationOptions:
    compute_base_seconds: float = 0.0
    metadata_seconds: float = 0.0
    include_metadata_latency: bool = False
    check_plans: bool = False

    @classmethod
    def from_settings(cls, **overrides) -> 'SimulationOptions':
        values = {
            'compute_base_seconds': settings.SIMULATION_COMPUTE_BASE_SECONDS,
            'metadata_seconds': settings.SIMULATION_METADATA_SECONDS,
            'include_metadata_latency': settings.SIMULATION_INCLUDE_METADATA_LATENCY,
            'check_plans': settings.SIMULATION_CHECK_PLANS,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return {
            'compute_base_seconds': self.compute_base_seconds,
            'metadata_seconds': self.metadata_seconds,
            'include_metadata_latency': self.include_metadata_latency,
            'check_plans': self.check_plans,
        }


def _check_plan_agreement(prev: ExpertPlacement, placement: ExpertPlacement, spec: ClusterSpec,
                          t_grad: float, t_weight: float, iteration: int):
    totals = plan_byte_totals(build_comm_plan(prev, placement, spec))
    tolerance = settings.COMM_PLAN_TOLERANCE
    for phase, planned, modeled in (
        ('grad', totals.max_grad_seconds(spec), t_grad),
        ('weight', totals.max_weight_seconds(spec), t_weight),
    ):
        if modeled > 0 and abs(planned - modeled) / modeled > tolerance:
            raise InvariantViolation(
                f"iteration {iteration}: planned {phase} time {planned:.6g}s deviates from "
                f"model {modeled:.6g}s by more than {tolerance:.0%}"
            )


def run(trace: Trace, spec: ClusterSpec, policy: PolicyConfig,
        options: Optional[SimulationOptions] = None) -> SimReport:
    if options is None:
        options = SimulationOptions.from_settings()
    validate_cluster(spec)
    validate_policy(policy, spec)
    if trace.expert_classes != spec.expert_classes:
        raise ShapeMismatch(f"trace has E = {trace.expert_classes}, cluster spec E = {spec.expert_classes}")

    if policy.kind == PolicyKind.PER_ITERATION:
        phase = comm_time_dynamic(spec)
    else:
        phase = comm_time_static(spec)

    logger.info(f"Simulating {policy.label} over {len(trace)} iterations (N={spec.nodes}, s={spec.slots_per_rank}, E={spec.expert_classes})")

    records: List[IterationRecord] = []
    placement: Optional[ExpertPlacement] = None
    prev_popularity = None
    for t in range(len(trace)):
        decision = next_placement(policy, t, prev_popularity, placement, spec)
        migration_s = 0.0
        if decision.rebalanced:
            migration_s = migration_time(policy, placement, decision.placement, spec)
        if options.check_plans and policy.kind == PolicyKind.PER_ITERATION:
            _check_plan_agreement(placement or decision.placement, decision.placement, spec,
                                  phase.t_grad, phase.t_weight, t)
        placement = decision.placement

        popularity = trace[t]
        outcome = route(popularity, placement, spec)
        if sum(outcome.instance_loads) + outcome.total_dropped != outcome.total_assigned:
            raise InvariantViolation(f"iteration {t}: token conservation violated")

        metadata_s = 0.0
        if options.include_metadata_latency and policy.kind != PolicyKind.STATIC:
            metadata_s = options.metadata_seconds + outcome.popularity_allreduce_bytes / spec.bw_net

        total_s = phase.t_grad + phase.t_weight + migration_s + metadata_s + options.compute_base_seconds
        records.append(IterationRecord(
            iteration=t,
            policy=policy.label,
            churn=decision.migrated_slots,
            rebalanced=decision.rebalanced,
            dropped_per_class=outcome.dropped,
            dropped=outcome.total_dropped,
            routed=outcome.total_assigned,
            survival=outcome.survival_rate,
            comm_grad_s=phase.t_grad,
            comm_weight_s=phase.t_weight,
            migration_s=migration_s,
            metadata_s=metadata_s,
            compute_s=options.compute_base_seconds,
            total_s=total_s,
            replica_counts=placement.replica_counts,
        ))
        if decision.rebalanced and migration_s > 0:
            logger.debug(f"{policy.label} t={t}: churn {decision.migrated_slots}, migration {migration_s:.4f}s")
        prev_popularity = popularity

    report = SimReport(spec=spec, policy=policy, records=tuple(records), aggregates=compute_aggregates(records))
    logger.info(
        f"{policy.label}: survival {report.aggregates['survival_pct']:.2f}%, "
        f"mean latency {report.aggregates['mean_latency_s']:.4f}s"
    )
    return report


def unique_labels(policies: Sequence[PolicyConfig]) -> List[str]:
    labels = []
    for policy in policies:
        label = policy.label
        n = 2
        while label in labels:
            label = f"{policy.label}#{n}"
            n += 1
        labels.append(label)
    return labels


def compare(trace: Trace, spec: ClusterSpec, policies: Sequence[PolicyConfig],
            options: Optional[SimulationOptions] = None) -> Dict[str, SimReport]:
    """One report per policy over the same trace, keyed by policy label"""
    if not policies:
        raise ShapeMismatch('compare needs at least one policy')
    if options is None:
        options = SimulationOptions.from_settings()
    labels = unique_labels(policies)

    if settings.SIMULATION_DISPATCH == 'celery':
        from simulation.tasks import run_policy_simulation

        rows = [list(row.counts) for row in trace.rows]
        pending = {
            label: run_policy_simulation.delay(
                rows, trace.tokens_per_batch, spec.to_dict(), policy.to_dict(), options.to_dict()
            )
            for label, policy in zip(labels, policies)
        }
        return {label: SimReport.from_dict(result.get()) for label, result in pending.items()}

    return {label: run(trace, spec, policy, options) for label, policy in zip(labels, policies)}


def format_comparison(reports: Dict[str, SimReport]) -> str:
    header = (
        f"{'policy':<24}{'dropped':>12}{'survival %':>12}{'mean s':>12}"
        f"{'rebalance s':>13}{'total s':>12}{'rebalances':>12}{'mean churn':>12}"
    )
    lines = [header, '-' * len(header)]
    for label, report in reports.items():
        a = report.aggregates
        rebalance = a['mean_rebalance_latency_s']
        lines.append(
            f"{label:<24}{a['total_dropped']:>12}{a['survival_pct']:>12.3f}{a['mean_latency_s']:>12.5f}"
            f"{(f'{rebalance:.5f}' if rebalance is not None else '-'):>13}{a['time_to_process_s']:>12.3f}"
            f"{a['rebalance_count']:>12}{a['mean_churn']:>12.2f}"
        )
    return '\n'.join(lines)


def report_filename(label: str) -> str:
    return label.replace('#', '_')


def write_report_json(report: SimReport, out_dir, label: Optional[str] = None) -> Path:
    path = Path(out_dir) / f"{report_filename(label or report.label)}.json"
    with open(path, 'w', encoding='utf-8') as file:
        json.dump(report.to_dict(), file, indent=2, sort_keys=True)
        file.write('\n')
    return path


def write_report_csv(report: SimReport, out_dir, label: Optional[str] = None) -> Path:
    path = Path(out_dir) / f"{report_filename(label or report.label)}.csv"
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for r in report.records:
            writer.writerow([
                r.iteration, r.churn, r.dropped, repr(r.survival),
                repr(r.comm_grad_s), repr(r.comm_weight_s), repr(r.migration_s), repr(r.total_s),
            ])
    return path


def write_reports(reports: Dict[str, SimReport], out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, report in reports.items():
        written.append(write_report_json(report, out_dir, label))
        written.append(write_report_csv(report, out_dir, label))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written
