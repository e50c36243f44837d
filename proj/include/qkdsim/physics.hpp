#pragma once

// Parametric SKR/QBER model of one quantum link under injected attacker power.
//
// Noise reaching the detector band:
//     R_n = R_dark + kappa * (10^((P_dBm - S) / 10))^gamma
// Error rate and secret key rate:
//     Q   = (0.5 * R_n + e_int * R_s) / (R_s + R_n)
//     SKR = max(0, R_s * (1 - (1 + f) * h2(Q)))
// gamma = 1 is the plain linear crosstalk model. calibrate() raises gamma only
// when the knee and death anchors sit too close together for a linear onset.

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace qkdsim {

// Attacker switched off.
inline constexpr double kAttackOff = -std::numeric_limits<double>::infinity();

inline constexpr double kDefaultEcEfficiency = 1.2;

struct ChannelParams {
    double sifted_rate_cps = 0.0;
    double intrinsic_error = 0.01;
    double dark_rate_cps = 0.0;
    double noise_coupling_cps_per_mw = 0.0;
    double suppression_db = 0.0;
    double ec_efficiency = kDefaultEcEfficiency;
    double noise_exponent = 1.0;

    friend bool operator==(const ChannelParams&, const ChannelParams&) = default;
};

struct QuantumSample {
    double skr_bps = 0.0;
    double qber = 0.0;
};

// Relative standard deviations of the measurement scatter.
struct JitterConfig {
    double skr_rel_sigma = 0.03;
    double qber_rel_sigma = 0.05;
};

struct CalibrationAnchors {
    double baseline_skr_bps = 0.0;
    double baseline_qber = 0.0;
    double knee_power_dbm = 0.0;
    double death_power_dbm = 0.0;
    double suppression_db = 0.0;
    double ec_efficiency = kDefaultEcEfficiency;
    // Relative SKR loss allowed at the knee power.
    double knee_skr_drop = 0.005;
};

inline void validate(const ChannelParams& p) {
    auto fail = [](const std::string& what) { throw ValidationError("channel: " + what); };
    if (!(p.sifted_rate_cps >= 0.0)) fail("sifted_rate_cps must be >= 0");
    if (!(p.dark_rate_cps >= 0.0)) fail("dark_rate_cps must be >= 0");
    if (!(p.noise_coupling_cps_per_mw >= 0.0)) fail("noise_coupling_cps_per_mw must be >= 0");
    if (!(p.intrinsic_error > 0.0 && p.intrinsic_error < 0.5)) fail("intrinsic_error must lie in (0, 0.5)");
    if (!(p.ec_efficiency >= 1.0)) fail("ec_efficiency must be >= 1");
    if (!(p.suppression_db >= 0.0)) fail("suppression_db must be >= 0");
    if (!(p.noise_exponent > 0.0 && std::isfinite(p.noise_exponent))) fail("noise_exponent must be > 0");
}

/// Binary Shannon entropy h2(x) in bits; h2(0) = h2(1) = 0.
inline double binary_entropy(double x) {
    if (!(x >= 0.0 && x <= 1.0)) {
        throw std::domain_error("binary_entropy: argument outside [0, 1]");
    }
    if (x == 0.0 || x == 1.0) {
        return 0.0;
    }
    return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

// Attacker-induced noise counts on top of the dark floor.
inline double attack_noise_rate(const ChannelParams& p, double attack_power_dbm) {
    if (attack_power_dbm == kAttackOff) {
        return 0.0;
    }
    const double linear_mw = std::pow(10.0, (attack_power_dbm - p.suppression_db) / 10.0);
    return p.noise_coupling_cps_per_mw * std::pow(linear_mw, p.noise_exponent);
}

inline double noise_rate(const ChannelParams& p, double attack_power_dbm) {
    return p.dark_rate_cps + attack_noise_rate(p, attack_power_dbm);
}

namespace detail {

    inline double qber_for_noise(const ChannelParams& p, double noise_cps) {
        const double total = p.sifted_rate_cps + noise_cps;
        if (total <= 0.0) {
            return 0.5;
        }
        const double q = (0.5 * noise_cps + p.intrinsic_error * p.sifted_rate_cps) / total;
        return std::clamp(q, 0.0, 0.5);
    }

    // Fraction of sifted bits left after error correction and privacy
    // amplification; negative once no secret key can be distilled.
    inline double secret_fraction(double q, double ec_efficiency) {
        return 1.0 - (1.0 + ec_efficiency) * binary_entropy(q);
    }

} // namespace detail

inline double qber(const ChannelParams& p, double attack_power_dbm) {
    return detail::qber_for_noise(p, noise_rate(p, attack_power_dbm));
}

inline double skr(const ChannelParams& p, double attack_power_dbm) {
    const double q = qber(p, attack_power_dbm);
    return std::max(0.0, p.sifted_rate_cps * detail::secret_fraction(q, p.ec_efficiency));
}

/// QBER at which the secret fraction reaches zero, i.e. the root of
/// h2(Q) = 1 / (1 + f) on (0, 0.5), bisected to 1e-12.
inline double abort_qber(double ec_efficiency) {
    if (!(ec_efficiency >= 1.0)) {
        throw std::domain_error("abort_qber: ec_efficiency must be >= 1");
    }
    const double target = 1.0 / (1.0 + ec_efficiency);
    double lo = 0.0, hi = 0.5;
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (binary_entropy(mid) < target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

/// Fits ChannelParams to measured anchor points.
///
/// Sifted rate and intrinsic error come from the unattacked baseline, with
/// the dark rate folded into the intrinsic error. The attack term is fitted
/// so that the death power kills the key and the knee power costs at most
/// `knee_skr_drop` of the baseline SKR, raising gamma above 1 if needed.
inline ChannelParams calibrate(const CalibrationAnchors& a) {
    if (!(a.death_power_dbm > a.knee_power_dbm)) {
        throw CalibrationError("calibrate: death power must lie above knee power");
    }
    if (!(a.baseline_skr_bps > 0.0)) {
        throw CalibrationError("calibrate: baseline SKR must be positive");
    }
    if (!(a.baseline_qber > 0.0 && a.baseline_qber < 0.5)) {
        throw CalibrationError("calibrate: baseline QBER must lie in (0, 0.5)");
    }
    if (!(a.ec_efficiency >= 1.0) || !(a.suppression_db >= 0.0)) {
        throw CalibrationError("calibrate: ec_efficiency must be >= 1 and suppression_db >= 0");
    }
    if (!(a.knee_skr_drop > 0.0 && a.knee_skr_drop < 1.0)) {
        throw CalibrationError("calibrate: knee_skr_drop must lie in (0, 1)");
    }

    const double baseline_fraction = detail::secret_fraction(a.baseline_qber, a.ec_efficiency);
    if (!(baseline_fraction > 0.0)) {
        throw CalibrationError("calibrate: baseline QBER is already above the abort threshold");
    }

    ChannelParams p;
    p.intrinsic_error = a.baseline_qber;
    p.sifted_rate_cps = a.baseline_skr_bps / baseline_fraction;
    p.dark_rate_cps = 0.0;
    p.suppression_db = a.suppression_db;
    p.ec_efficiency = a.ec_efficiency;

    auto fraction_at = [&](double noise_cps) {
        return detail::secret_fraction(detail::qber_for_noise(p, noise_cps), p.ec_efficiency);
    };

    // Smallest noise rate with a non-positive secret fraction.
    double hi = p.sifted_rate_cps;
    while (fraction_at(hi) > 0.0) {
        hi *= 2.0;
    }
    double lo = 0.0;
    while (hi - lo > 1e-12 * hi) {
        const double mid = 0.5 * (lo + hi);
        (fraction_at(mid) > 0.0 ? lo : hi) = mid;
    }
    const double death_noise = hi * (1.0 + 1e-9);

    const double knee_fraction = (1.0 - a.knee_skr_drop) * baseline_fraction;
    lo = 0.0;
    hi = death_noise;
    while (hi - lo > 1e-12 * death_noise) {
        const double mid = 0.5 * (lo + hi);
        (fraction_at(mid) > knee_fraction ? lo : hi) = mid;
    }
    const double knee_noise = lo;

    const double knee_mw = std::pow(10.0, (a.knee_power_dbm - a.suppression_db) / 10.0);
    const double death_mw = std::pow(10.0, (a.death_power_dbm - a.suppression_db) / 10.0);
    const double exponent = std::log(death_noise / knee_noise) / std::log(death_mw / knee_mw);

    p.noise_exponent = std::max(1.0, exponent);
    p.noise_coupling_cps_per_mw = death_noise / std::pow(death_mw, p.noise_exponent);

    if (skr(p, a.death_power_dbm) != 0.0) {
        throw CalibrationError("calibrate: fitted parameters do not stop key generation at the death power");
    }
    return p;
}

/// One noisy measurement around the model means. Consumes exactly two normal
/// draws from `rng` regardless of outcome.
inline QuantumSample sample(const ChannelParams& p, double attack_power_dbm, std::mt19937_64& rng,
                            const JitterConfig& jitter = {}) {
    std::normal_distribution<double> unit_normal(0.0, 1.0);
    const double zq = unit_normal(rng);
    const double zs = unit_normal(rng);

    QuantumSample s;
    s.qber = std::clamp(qber(p, attack_power_dbm) * (1.0 + jitter.qber_rel_sigma * zq), 0.0, 0.5);
    s.skr_bps = std::max(0.0, skr(p, attack_power_dbm) * (1.0 + jitter.skr_rel_sigma * zs));
    if (s.qber >= abort_qber(p.ec_efficiency)) {
        s.skr_bps = 0.0;
    }
    return s;
}

// ---- serialization -------------------------------------------------------

inline json to_json_value(const ChannelParams& p) {
    json j = {
        {"sifted_rate_cps", p.sifted_rate_cps},
        {"intrinsic_error", p.intrinsic_error},
        {"dark_rate_cps", p.dark_rate_cps},
        {"noise_coupling_cps_per_mw", p.noise_coupling_cps_per_mw},
        {"suppression_db", p.suppression_db},
        {"ec_efficiency", p.ec_efficiency},
    };
    if (p.noise_exponent != 1.0) {
        j["noise_exponent"] = p.noise_exponent;
    }
    return j;
}

inline CalibrationAnchors parse_anchors(const json& j, std::string_view ctx) {
    CalibrationAnchors a;
    a.baseline_skr_bps = detail::require<double>(j, "baseline_skr_bps", ctx);
    a.baseline_qber = detail::require<double>(j, "baseline_qber", ctx);
    a.knee_power_dbm = detail::require<double>(j, "knee_power_dbm", ctx);
    a.death_power_dbm = detail::require<double>(j, "death_power_dbm", ctx);
    a.suppression_db = detail::require<double>(j, "suppression_db", ctx);
    a.ec_efficiency = detail::optional_field<double>(j, "ec_efficiency", kDefaultEcEfficiency, ctx);
    a.knee_skr_drop = detail::optional_field<double>(j, "knee_skr_drop", a.knee_skr_drop, ctx);
    return a;
}

// Accepts either explicit parameters or a {"calibrate": {...}} block.
inline ChannelParams parse_channel(const json& j, std::string_view ctx) {
    if (!j.is_object()) {
        throw ValidationError(std::string(ctx) + ": channel must be an object");
    }
    ChannelParams p;
    if (j.contains("calibrate")) {
        try {
            p = calibrate(parse_anchors(j.at("calibrate"), std::string(ctx) + ".calibrate"));
        } catch (const CalibrationError& e) {
            throw ValidationError(std::string(ctx) + ": " + e.what());
        }
    } else {
        p.sifted_rate_cps = detail::require<double>(j, "sifted_rate_cps", ctx);
        p.intrinsic_error = detail::require<double>(j, "intrinsic_error", ctx);
        p.dark_rate_cps = detail::require<double>(j, "dark_rate_cps", ctx);
        p.noise_coupling_cps_per_mw = detail::require<double>(j, "noise_coupling_cps_per_mw", ctx);
        p.suppression_db = detail::require<double>(j, "suppression_db", ctx);
        p.ec_efficiency = detail::require<double>(j, "ec_efficiency", ctx);
        p.noise_exponent = detail::optional_field<double>(j, "noise_exponent", 1.0, ctx);
    }
    try {
        validate(p);
    } catch (const ValidationError& e) {
        throw ValidationError(std::string(ctx) + ": " + e.what());
    }
    return p;
}

} // namespace qkdsim
