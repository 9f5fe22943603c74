/** Queue/eval summary formatting for the stats panel. */

import type { QueueStats } from './api.js';

export const NO_RATE = '—'; // em dash: nothing decided yet

export function formatMergeRate(stats: QueueStats): string {
  if (stats.decided === 0 || stats.merge_rate === null) return NO_RATE;
  const pct = Math.round(stats.merge_rate * 1000) / 10;
  return (Number.isInteger(pct) ? pct.toFixed(0) : pct.toFixed(1)) + '%';
}

export interface StatsPanelModel {
  total: number;
  decided: number;
  pending: number;
  mergeRate: string;
  verdicts: QueueStats['verdicts'];
}

/** Panel values are the payload's numbers verbatim; only the rate is formatted. */
export function statsPanelModel(stats: QueueStats): StatsPanelModel {
  return {
    total: stats.total,
    decided: stats.decided,
    pending: stats.pending,
    mergeRate: formatMergeRate(stats),
    verdicts: stats.verdicts,
  };
}
