/**
 * Typed client for the review service HTTP API.
 *
 * One method per endpoint, resolving with the parsed JSON payload. Non-2xx
 * responses become ApiError carrying the server's error code; network
 * failures keep their native TypeError so callers can tell "server said no"
 * from "server not there".
 */

export type Verdict = 'merge' | 'no_merge' | 'indeterminate';
export type Axis = 'x' | 'y' | 'z';

export interface CandidateDescriptor {
  id: string;
  a: number;
  b: number;
  contact_voxels: number;
  rep: [number, number, number];
  scores: Record<string, number>;
  workflow: string;
}

export interface LeaseInfo {
  reviewer: string;
  expires_at: string;
}

export interface QueueStats {
  total: number;
  decided: number;
  pending: number;
  merge_rate: number | null;
  verdicts: Record<Verdict, number>;
}

export interface NextTaskResponse {
  empty: boolean;
  candidate?: CandidateDescriptor;
  lease?: LeaseInfo;
  queue: QueueStats;
}

export interface MaskRuns {
  shape: [number, number];
  runs: Array<[number, number]>;
}

export interface SlicePayload {
  candidate_id: string;
  axis: Axis;
  index: number;
  edge: number;
  png: string; // base64-encoded grayscale PNG
  masks: { a: MaskRuns; b: MaskRuns; synapse: MaskRuns };
}

export interface DecisionAck {
  candidate_id: string;
  sequence: number;
  duplicate: boolean;
}

export interface PrCurvePayload {
  available: boolean;
  auprc?: number;
  points?: Array<[number, number]>; // [recall, precision]
  thresholds?: number[];
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl = '',
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, init);
    if (!res.ok) {
      let code = 'http_error';
      let message = `HTTP ${res.status}`;
      try {
        const body = (await res.json()) as { error?: string; message?: string };
        if (body && typeof body.error === 'string') {
          code = body.error;
          if (typeof body.message === 'string') message = body.message;
        }
      } catch {
        // non-JSON error body; keep the generic message
      }
      throw new ApiError(res.status, code, message);
    }
    return (await res.json()) as T;
  }

  nextTask(workflow: string, reviewer: string): Promise<NextTaskResponse> {
    const q = new URLSearchParams({ workflow, reviewer });
    return this.request(`/api/tasks/next?${q.toString()}`);
  }

  submitDecision(candidateId: string, verdict: Verdict, reviewer: string): Promise<DecisionAck> {
    return this.request(`/api/tasks/${encodeURIComponent(candidateId)}/decision`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ verdict, reviewer }),
    });
  }

  slice(candidateId: string, axis: Axis, index: number): Promise<SlicePayload> {
    const q = new URLSearchParams({ axis, index: String(index) });
    return this.request(`/api/candidates/${encodeURIComponent(candidateId)}/slices?${q.toString()}`);
  }

  stats(): Promise<QueueStats> {
    return this.request('/api/stats');
  }

  evalPr(): Promise<PrCurvePayload> {
    return this.request('/api/eval/pr');
  }
}
