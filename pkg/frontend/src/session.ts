// Pure view-state for one rating session. Holds only the opaque token and
// progress counters; the item's identity never reaches the client.

import type { NextResponse } from "./api.js";

export interface SessionView {
  sessionId: string;
  done: number;
  total: number;
  token: string | null;
  imageDataUrl: string | null;
  finished: boolean;
}

export function viewFromNext(sessionId: string, resp: NextResponse): SessionView {
  if ("done" in resp && resp.done === true) {
    return { sessionId, done: 0, total: 0, token: null, imageDataUrl: null, finished: true };
  }
  const item = resp as Exclude<NextResponse, { done: true }>;
  return {
    sessionId,
    done: item.progress.done,
    total: item.progress.total,
    token: item.token,
    imageDataUrl: `data:image/png;base64,${item.image}`,
    finished: false,
  };
}

// keyboard keys 1-9 map to scores 1-9; 0 maps to 10
export function keyToScore(key: string): number | null {
  if (key >= "1" && key <= "9") {
    return key.charCodeAt(0) - "0".charCodeAt(0);
  }
  if (key === "0") {
    return 10;
  }
  return null;
}

export function isValidScore(score: number): boolean {
  return Number.isInteger(score) && score >= 1 && score <= 10;
}
