use std::collections::{BTreeMap, BTreeSet};

/// Function-level permissions: function name → principal classes allowed to
/// call it. Functions without an entry are denied to everyone.
///
/// Business functions are named `<service>.<action>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PermissionTable {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl PermissionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Permissions for the bundled services: users and services may trade,
    /// users run contracts and banking, admins run the admin functions.
    pub fn starter() -> Self {
        let mut t = Self::new();
        for f in ["trading.list_quotes", "trading.get_quote", "trading.search"] {
            t.set(f, "user", true);
            t.set(f, "service", true);
        }
        for f in [
            "contracts.create_contract",
            "contracts.get_contract",
            "banking.get_balance",
            "banking.deposit",
        ] {
            t.set(f, "user", true);
        }
        for f in [
            "admin.status",
            "admin.reset_breaker",
            "admin.set_permission",
            "admin.grant_link",
            crate::ids_breaker::RESET_PERMISSION,
        ] {
            t.set(f, "admin", true);
        }
        t
    }

    pub fn set(&mut self, function: &str, class: &str, allowed: bool) {
        let function = function.to_ascii_lowercase();
        if allowed {
            self.entries
                .entry(function)
                .or_default()
                .insert(class.to_string());
        } else if let Some(classes) = self.entries.get_mut(&function) {
            classes.remove(class);
            if classes.is_empty() {
                self.entries.remove(&function);
            }
        }
    }

    pub fn with(mut self, function: &str, class: &str, allowed: bool) -> Self {
        self.set(function, class, allowed);
        self
    }

    pub fn classes_for(&self, function: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(&function.to_ascii_lowercase())
    }

    /// True iff one of `classes` is listed for `function`.
    pub fn allows<'a>(&self, function: &str, classes: impl IntoIterator<Item = &'a str>) -> bool {
        match self.classes_for(function) {
            Some(allowed) => classes.into_iter().any(|c| allowed.contains(c)),
            None => false,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.entries.iter().map(|(f, c)| (f.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Named principal groups beyond the implicit `user` and `service` classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassDirectory {
    members: BTreeMap<String, BTreeSet<String>>,
}

impl ClassDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: &str, principal: &str) {
        self.members
            .entry(class.to_string())
            .or_default()
            .insert(principal.to_string());
    }

    pub fn with(mut self, class: &str, principal: &str) -> Self {
        self.add(class, principal);
        self
    }

    /// Explicit classes `principal` belongs to.
    pub fn classes_of<'a>(&'a self, principal: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.members
            .iter()
            .filter(move |(_, m)| m.contains(principal))
            .map(|(c, _)| c.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_deny() {
        let t = PermissionTable::new();
        assert!(!t.allows("trading.list_quotes", ["user", "admin"]));
    }

    #[test]
    fn grant_and_revoke() {
        let mut t = PermissionTable::new();
        t.set("export_report", "user", true);
        assert!(t.allows("export_report", ["user"]));
        assert!(t.allows("EXPORT_REPORT", ["user"]));
        assert!(!t.allows("export_report", ["service"]));
        t.set("export_report", "user", false);
        assert!(!t.allows("export_report", ["user"]));
        assert!(t.is_empty());
    }

    #[test]
    fn classes_from_directory() {
        let d = ClassDirectory::new().with("admin", "root").with("ops", "root");
        assert_eq!(d.classes_of("root").collect::<Vec<_>>(), ["admin", "ops"]);
        assert_eq!(d.classes_of("alice").count(), 0);
    }
}
