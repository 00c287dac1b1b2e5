/** JSON payload shapes of the conversation-practice service API. */

export interface SkillInfo {
  skill_id: number;
  super_category: string;
  subcategory: string;
  guideword: string;
  can_do: string;
  level: string;
  type: string;
}

export interface SkillSpan {
  skill_id: number;
  start_token: number;
  end_token: number; // exclusive
  max_probability: number;
  tokens: string[];
}

export type ExplicitConstraints = { variant: "explicit"; skills: number[] };
export type CategoricalConstraints = { variant: "categorical"; pairs: [string, string][] };
export type Constraints = ExplicitConstraints | CategoricalConstraints;

export interface SessionCreatePayload {
  constraints?: Constraints;
  learner_profile?: Record<string, string>;
  strategy: string;
  params?: Record<string, unknown>;
}

export interface SessionInfo {
  session_id: string;
  strategy: string;
  constraints: Constraints | null;
  learner_profile: Record<string, string> | null;
  turns: number;
}

export interface TurnMetrics {
  latency_seconds: number;
  word_count: number;
  satisfaction?: number;
  satisfied_categories?: number;
  overshoot?: number;
}

export interface TurnPayload {
  learner_detections: number[];
  learner_spans: SkillSpan[];
  text: string;
  skill_spans: SkillSpan[];
  detections: number[];
  metrics: TurnMetrics;
  constraints: Constraints | null;
}

export interface ProgressEntry {
  exposures: number;
  productions: number;
}

export interface ProgressPayload {
  session_id: string;
  skills: Record<string, ProgressEntry>;
}

export interface DetectPayload {
  detections: number[];
  spans: SkillSpan[];
}
